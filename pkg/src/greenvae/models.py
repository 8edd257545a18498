"""Trainable models behind one interface.

Every model exposes ``params``, ``buffers``, ``graphs``, ``objective``
(one minibatch loss plus logged statistics), ``encode`` (codes used for
diagnostics and ex-post density estimation), ``decode`` and
``state_tensors`` for checkpointing extra state.
"""

from __future__ import annotations

from typing import Any

import numpy as np

from .autodiff import Tensor, no_tape, ops
from .config import TrainConfig
from .flows import (AutoregressiveStep, LatentGroups, gaussian_log_density, hierarchical_kl,
                    iaf_forward, iaf_log_density)
from .hvae import build_hvae
from .layers import ModelGraph, Network, build_vanilla_cnn
from .regularized import RaeConfig, SpectralNorm, gradient_penalty, l2_reg, rae_loss
from .vae import (BalanceState, GaussianParams, kl_closed_form, reconstruction_loss, reparametrize,
                  update_balance)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


class Model:
    name = "model"
    stochastic = True

    def __init__(self, input_shape: tuple[int, int, int], latent_dim: int):
        self.input_shape = tuple(input_shape)
        self.latent_dim = latent_dim

    # subclasses provide: networks, objective, encode, decode
    networks: list[Network]

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for net in self.networks:
            out.update(net.params)
        return out

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for net in self.networks:
            out.update(net.buffers)
        return out

    @property
    def graphs(self) -> list[ModelGraph]:
        return [n.graph for n in self.networks]

    @property
    def pixels(self) -> int:
        return int(np.prod(self.input_shape))

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        pass

    def _gamma(self, balance: BalanceState | None, rec: Tensor, fixed: float) -> float:
        if balance is None:
            return fixed
        return update_balance(balance, rec.item() / self.pixels)

    def decode_numpy(self, z) -> np.ndarray:
        with no_tape():
            return self.decode(z).data

    def reconstruct(self, x) -> np.ndarray:
        with no_tape():
            codes = self.encode(x)
            z = codes.mean if isinstance(codes, GaussianParams) else codes
            return self.decode(z).data

    def encode_moments(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample code means and variances (zero variances for deterministic encoders)."""
        with no_tape():
            codes = self.encode(x)
        if isinstance(codes, GaussianParams):
            return codes.mean.data.astype(np.float64), np.exp(codes.clamped_logvar().data.astype(np.float64))
        m = codes.data.astype(np.float64)
        return m, np.zeros_like(m)


class VanillaVAE(Model):
    name = "vanilla"

    def __init__(self, input_shape, latent_dim: int, base_channels: int, seed: int = 0,
                 decoder_layout: str = "figure", batchnorm: bool = True, gamma: float = 1.0):
        super().__init__(input_shape, latent_dim)
        side, _, ch = input_shape
        enc, dec = build_vanilla_cnn(side, base_channels, latent_dim, ch, decoder_layout, batchnorm)
        self.encoder = Network(enc, seed=seed)
        self.decoder = Network(dec, seed=seed + 1)
        self.networks = [self.encoder, self.decoder]
        self.fixed_gamma = gamma

    def encode(self, x, train: bool = False) -> GaussianParams:
        mean, logvar = self.encoder(_tensor(x), train=train)
        return GaussianParams(mean, logvar)

    def decode(self, z, train: bool = False) -> Tensor:
        return self.decoder(_tensor(z), train=train)

    def objective(self, x, rng: np.random.Generator, balance: BalanceState | None = None, train: bool = True):
        q = self.encode(x, train)
        eps = rng.standard_normal(q.mean.shape).astype(np.float32)
        x_hat = self.decode(reparametrize(q, eps), train)
        rec = reconstruction_loss(x, x_hat)
        kl = kl_closed_form(q)
        gamma = self._gamma(balance, rec, self.fixed_gamma)
        total = ops.add(rec, ops.mul(kl, gamma))
        return total, {"rec": rec.item(), "kl": kl.item(), "gamma": gamma}


class RAE(Model):
    """Deterministic autoencoder with a decoder regularizer (l2, gp or sn)."""

    stochastic = False

    def __init__(self, input_shape, latent_dim: int, base_channels: int, cfg: RaeConfig, seed: int = 0,
                 decoder_layout: str = "figure", batchnorm: bool = True):
        super().__init__(input_shape, latent_dim)
        side, _, ch = input_shape
        enc, dec = build_vanilla_cnn(side, base_channels, latent_dim, ch, decoder_layout, batchnorm,
                                     deterministic=True)
        self.cfg = cfg
        self.name = f"rae-{cfg.reg_kind}"
        self.sn = SpectralNorm(cfg.sn_iters, seed) if cfg.reg_kind == "sn" else None
        self.encoder = Network(enc, seed=seed)
        self.decoder = Network(dec, seed=seed + 1, weight_hook=self.sn)
        self.networks = [self.encoder, self.decoder]

    def encode(self, x, train: bool = False) -> Tensor:
        return self.encoder(_tensor(x), train=train)

    def decode(self, z, train: bool = False) -> Tensor:
        return self.decoder(_tensor(z), train=train)

    def regularizer(self, z: Tensor, rng: np.random.Generator) -> Tensor | None:
        kind = self.cfg.reg_kind
        if kind == "l2":
            return l2_reg(self.decoder.params)
        if kind == "gp":
            return gradient_penalty(lambda u: self.decoder(u, train=True), Tensor(z.data),
                                    self.cfg.gp_probes, self.cfg.gp_eps, rng)
        return None

    def objective(self, x, rng: np.random.Generator, balance: BalanceState | None = None, train: bool = True):
        z = self.encode(x, train)
        x_hat = self.decode(z, train)
        terms = rae_loss(x, x_hat, z, self.cfg, self.regularizer(z, rng))
        # rec logged as the pixel-summed squared error, like the VAEs
        return terms.total, {"rec": 2 * terms.rec.item(), "kl": 0.0, "gamma": self.cfg.gamma,
                             "reg": terms.reg.item(), "code": terms.code.item()}

    def state_tensors(self) -> dict[str, np.ndarray]:
        if self.sn is None:
            return {}
        return {f"sn.{k}": v.astype(np.float32) for k, v in self.sn.state.items()}

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        if self.sn is not None:
            self.sn.state = {k[3:]: v.astype(np.float64) for k, v in tensors.items() if k.startswith("sn.")}


class IAFVAE(Model):
    """Gaussian encoder followed by T inverse autoregressive flow steps."""

    name = "iaf"

    def __init__(self, input_shape, latent_dim: int, base_channels: int, steps: int = 2, hidden: int = 64,
                 seed: int = 0, decoder_layout: str = "figure", batchnorm: bool = True, gamma: float = 1.0):
        super().__init__(input_shape, latent_dim)
        side, _, ch = input_shape
        enc, dec = build_vanilla_cnn(side, base_channels, latent_dim, ch, decoder_layout, batchnorm)
        enc.add("dense", "context", "flatten", units=hidden)
        enc.set_outputs(["mean", "logvar", "context"])
        self.encoder = Network(enc, seed=seed)
        self.decoder = Network(dec, seed=seed + 1)
        self.networks = [self.encoder, self.decoder]
        rng = np.random.default_rng(seed + 2)
        self.steps = [AutoregressiveStep(f"iaf.step{t}", latent_dim, hidden, hidden, rng, reverse=bool(t % 2))
                      for t in range(steps)]
        self.fixed_gamma = gamma

    @property
    def params(self) -> dict[str, Tensor]:
        out = super().params
        for s in self.steps:
            out.update(s.params)
        return out

    def _flow(self, z0: Tensor, h: Tensor):
        z, steps = z0, []
        for net in self.steps:
            step = net(z, h)
            steps.append(step)
            z = iaf_forward(z, [step])
        return z, steps

    def encode(self, x, train: bool = False) -> GaussianParams:
        mean, logvar, _ = self.encoder(_tensor(x), train=train)
        return GaussianParams(mean, logvar)

    def encode_flow(self, x, train: bool = False) -> Tensor:
        """Flow image of the base mean (noise 0)."""
        mean, _, h = self.encoder(_tensor(x), train=train)
        return self._flow(mean, h)[0]

    def reconstruct(self, x) -> np.ndarray:
        with no_tape():
            return self.decode(self.encode_flow(x)).data

    def decode(self, z, train: bool = False) -> Tensor:
        return self.decoder(_tensor(z), train=train)

    def objective(self, x, rng: np.random.Generator, balance: BalanceState | None = None, train: bool = True):
        mean, logvar, h = self.encoder(_tensor(x), train=train)
        q = GaussianParams(mean, logvar)
        eps = rng.standard_normal(mean.shape).astype(np.float32)
        z0 = reparametrize(q, eps)
        log_q0 = gaussian_log_density(z0, mean, q.clamped_logvar())
        z_t, steps = self._flow(z0, h)
        log_q = iaf_log_density(log_q0, steps)
        log_p = gaussian_log_density(z_t, np.zeros_like(z_t.data), np.zeros_like(z_t.data))
        kl = ops.mean(ops.sub(log_q, log_p))  # single-sample estimate
        x_hat = self.decode(z_t, train)
        rec = reconstruction_loss(x, x_hat)
        gamma = self._gamma(balance, rec, self.fixed_gamma)
        total = ops.add(rec, ops.mul(kl, gamma))
        return total, {"rec": rec.item(), "kl": kl.item(), "gamma": gamma}


class HVAE(Model):
    name = "hvae"

    def __init__(self, input_shape, base_channels: int, scales: int = 2, groups_per_scale=(1, 1),
                 group_dims=(8, 8), film: bool = False, bottom_up: bool = False, seed: int = 0,
                 group_decay: float = 0.9, gamma: float = 1.0):
        side, _, ch = input_shape
        self.net = build_hvae(scales, groups_per_scale, base_channels, group_dims, side, ch, film, bottom_up, seed)
        super().__init__(input_shape, self.net.latent_dim)
        self.networks = self.net.networks
        self.groups: LatentGroups = self.net.groups
        self.groups.decay = group_decay
        self.fixed_gamma = gamma

    @property
    def params(self) -> dict[str, Tensor]:
        return self.net.params

    def _split(self, z) -> list[Tensor]:
        z = _tensor(z)
        out, start = [], 0
        for k in self.net.cfg.latent_dims:
            out.append(ops.slice(z, (slice(None), slice(start, start + k))))
            start += k
        return out

    def encode(self, x, train: bool = False) -> GaussianParams:
        _, posts, _, _ = self.net.infer(_tensor(x), use_mean=True)
        return GaussianParams(ops.concat([p.mean for p in posts], axis=-1),
                              ops.concat([p.logvar for p in posts], axis=-1))

    def decode(self, z, train: bool = False) -> Tensor:
        return self.net.decode_codes(self._split(z))

    def reconstruct(self, x) -> np.ndarray:
        with no_tape():
            return self.net.infer(_tensor(x), use_mean=True)[0].data

    def objective(self, x, rng: np.random.Generator, balance: BalanceState | None = None, train: bool = True):
        x = _tensor(x)
        noises = [rng.standard_normal((x.shape[0], k)).astype(np.float32) for k in self.net.cfg.latent_dims]
        x_hat, posts, priors, _ = self.net.infer(x, noises)
        rec = reconstruction_loss(x, x_hat)
        kls = self.net.group_kls(posts, priors)
        kl = hierarchical_kl(self.groups, posts, priors)
        gamma = self._gamma(balance, rec, self.fixed_gamma)
        total = ops.add(rec, ops.mul(kl, gamma))
        return total, {"rec": rec.item(), "kl": float(sum(k.item() for k in kls)), "gamma": gamma,
                       "group_kls": [k.item() for k in kls]}

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"hvae.group_gammas": self.groups.gammas.astype(np.float32)}
        if self.groups.ema_kl is not None:
            out["hvae.group_ema"] = self.groups.ema_kl.astype(np.float32)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        if "hvae.group_gammas" in tensors:
            self.groups.gammas = tensors["hvae.group_gammas"].astype(np.float64)
        if "hvae.group_ema" in tensors:
            self.groups.ema_kl = tensors["hvae.group_ema"].astype(np.float64)


def build_model(cfg: TrainConfig, input_shape: tuple[int, int, int]) -> Model:
    common: dict[str, Any] = {"seed": cfg.seed, "decoder_layout": cfg.decoder_layout, "batchnorm": cfg.batchnorm}
    if cfg.model == "vanilla":
        return VanillaVAE(input_shape, cfg.latent_dim, cfg.base_channels, gamma=cfg.gamma, **common)
    if cfg.model.startswith("rae-"):
        rc = RaeConfig(cfg.model[4:], None if cfg.rae_lambda < 0 else cfg.rae_lambda, cfg.rae_gamma,
                       cfg.gp_probes, cfg.gp_eps, cfg.sn_iters)
        return RAE(input_shape, cfg.latent_dim, cfg.base_channels, rc, **common)
    if cfg.model == "iaf":
        return IAFVAE(input_shape, cfg.latent_dim, cfg.base_channels, cfg.flow_steps, cfg.flow_hidden,
                      gamma=cfg.gamma, **common)
    if cfg.model == "hvae":
        return HVAE(input_shape, cfg.base_channels, cfg.scales, cfg.groups_per_scale, cfg.group_dims,
                    cfg.film, cfg.bottom_up, cfg.seed, cfg.group_decay, cfg.gamma)
    raise ValueError(f"unknown model {cfg.model!r}")
