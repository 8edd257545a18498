"""Latent-space machinery used at generation time.

Ex-post Gaussian mixture density estimation, the second-stage VAE trained
on collected codes, the cosine reconstruction loss, and ancestral sampling
through a first-stage decoder.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import logsumexp

from .autodiff import Tape, Tensor, backward, no_tape, ops
from .layers import ModelGraph, Network
from .optim import Adam, minibatches
from .vae import BalanceState, GaussianParams, kl_closed_form, reparametrize, update_balance

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
NORM_FLOOR = 1e-12
_LOG2PI = np.log(2 * np.pi)


# --- collecting codes ---------------------------------------------------------

def collect_latents(
    encode: Callable[[np.ndarray], Union[GaussianParams, Tensor]],
    data,
    mode: str = "mean",
    seed: int = 0,
    batch_size: int = 256,
    noise_scale: float = 1.0,
) -> np.ndarray:
    """Encode a dataset; one row per element.

    ``mode="mean"`` keeps the encoder means, ``"sampled"`` draws
    z = mean + sigma * eps with a seeded stream (deterministic encoders
    return their codes in both modes).
    """
    data = np.asarray(data)
    if len(data) == 0:
        raise ValueError("collect_latents: empty dataset")
    if mode not in ("mean", "sampled"):
        raise ValueError(f"mode must be 'mean' or 'sampled', got {mode!r}")
    rng = np.random.default_rng(seed)
    rows = []
    with no_tape():
        for i in range(0, len(data), batch_size):
            out = encode(data[i:i + batch_size])
            if isinstance(out, GaussianParams):
                if mode == "mean":
                    rows.append(out.mean.data.astype(np.float64))
                else:
                    eps = rng.standard_normal(out.mean.shape) * noise_scale
                    rows.append(reparametrize(out, eps.astype(out.mean.dtype)).data.astype(np.float64))
            else:
                rows.append(np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64))
    return np.concatenate(rows, axis=0)


# --- Gaussian mixture -----------------------------------------------------------

@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    diag_vars: np.ndarray
    var_floor: float = VAR_FLOOR
    loglik_history: list[float] = field(default_factory=list)
    restarts: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.diag_vars = np.maximum(np.atleast_2d(np.asarray(self.diag_vars, dtype=np.float64)), self.var_floor)
        if self.weights.ndim != 1 or self.weights.shape[0] != self.means.shape[0]:
            raise ValueError("weights must be a vector with one entry per component")
        if self.means.shape != self.diag_vars.shape:
            raise ValueError("means and diag_vars must have identical shape")
        if (self.weights < 0).any():
            raise ValueError("mixture weights must be nonnegative")
        self.weights = self.weights / self.weights.sum()

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_probs(self, z) -> np.ndarray:
        """log w_j + log N(z | m_j, diag v_j), shape (n, K)."""
        z = np.asarray(z, dtype=np.float64)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        out = np.empty((z.shape[0], self.n_components))
        for j in range(self.n_components):
            d = z - self.means[j]
            out[:, j] = -0.5 * (np.sum(d * d / self.diag_vars[j], axis=1)
                                + np.sum(np.log(self.diag_vars[j])) + self.dim * _LOG2PI)
        return out + logw

    def log_prob(self, z) -> np.ndarray:
        return logsumexp(self.component_log_probs(z), axis=1)

    def mean_moment(self) -> np.ndarray:
        return self.weights @ self.means

    def var_moment(self) -> np.ndarray:
        mu = self.mean_moment()
        return self.weights @ (self.diag_vars + self.means ** 2) - mu ** 2

    def to_tensors(self, prefix: str = "gmm") -> dict[str, np.ndarray]:
        return {f"{prefix}.weights": self.weights.astype(np.float32),
                f"{prefix}.means": self.means.astype(np.float32),
                f"{prefix}.vars": self.diag_vars.astype(np.float32)}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], prefix: str = "gmm") -> "GmmModel":
        return cls(tensors[f"{prefix}.weights"], tensors[f"{prefix}.means"], tensors[f"{prefix}.vars"])


def _kmeanspp(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [z[rng.integers(len(z))]]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(len(z)) if total <= 0 else rng.choice(len(z), p=d2 / total)
        centers.append(z[idx])
        d2 = np.minimum(d2, np.sum((z - z[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(z: np.ndarray, resp: np.ndarray, var_floor: float):
    nk = resp.sum(axis=0)
    k = resp.shape[1]
    means = np.empty((k, z.shape[1]))
    variances = np.empty((k, z.shape[1]))
    for j in range(k):
        r = resp[:, j:j + 1]
        means[j] = (r * z).sum(axis=0) / nk[j] if nk[j] > 0 else z.mean(axis=0)
        d = z - means[j]
        variances[j] = (r * d ** 2).sum(axis=0) / nk[j] if nk[j] > 0 else z.var(axis=0)
    return nk / len(z), means, np.maximum(variances, var_floor)


def gmm_fit_em(
    z,
    k: int,
    iters: int = 200,
    seed: int = 0,
    tol: float = 1e-7,
    var_floor: float = VAR_FLOOR,
    min_weight: float = 1e-8,
    max_restarts: int = 3,
) -> GmmModel:
    """Diagonal-covariance EM with k-means++ seeding.

    Stops after ``iters`` iterations or once the relative log-likelihood
    improvement drops below ``tol``.  A component whose weight falls under
    ``min_weight`` is re-seeded on the worst-explained point (at most
    ``max_restarts`` times).  ``loglik_history`` holds the total
    log-likelihood after every M-step.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"gmm_fit_em expects an (n, d) matrix, got {z.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(z) < k:
        raise ValueError(f"need at least k={k} points, got {len(z)}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(z, k, rng)
    d2 = ((z[:, None, :] - centers[None]) ** 2).sum(-1)
    resp = np.zeros((len(z), k))
    resp[np.arange(len(z)), d2.argmin(axis=1)] = 1.0
    weights, means, variances = _m_step(z, resp, var_floor)
    # empty hard clusters start from their seed point with the global variance
    for j in np.flatnonzero(resp.sum(axis=0) == 0):
        means[j], variances[j] = centers[j], np.maximum(z.var(axis=0), var_floor)
        weights[j] = 1.0 / len(z)
    model = GmmModel(weights, means, variances, var_floor)
    history: list[float] = []
    restarts = 0
    for _ in range(iters):
        comp = model.component_log_probs(z)
        norm = logsumexp(comp, axis=1, keepdims=True)
        resp = np.exp(comp - norm)
        weights, means, variances = _m_step(z, resp, var_floor)
        dead = np.flatnonzero(weights < min_weight)
        if dead.size:
            restarts += 1
            if restarts > max_restarts:
                raise RuntimeError(f"GMM component collapsed more than {max_restarts} times")
            worst = np.argsort(norm[:, 0])[: dead.size]
            for j, idx in zip(dead, worst):
                means[j], variances[j], weights[j] = z[idx], np.maximum(z.var(axis=0), var_floor), 1.0 / k
            weights = weights / weights.sum()
            model = GmmModel(weights, means, variances, var_floor)
            history = []  # monotonicity restarts with the new configuration
            continue
        model = GmmModel(weights, means, variances, var_floor)
        ll = float(model.log_prob(z).sum())
        if history and abs(ll - history[-1]) < tol * abs(history[-1]):
            history.append(ll)
            break
        history.append(ll)
    model.loglik_history = history
    model.restarts = restarts
    return model


def gmm_sample(model: GmmModel, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    comps = rng.choice(model.n_components, size=n, p=model.weights)
    eps = rng.standard_normal((n, model.dim))
    return model.means[comps] + np.sqrt(model.diag_vars[comps]) * eps


# --- cosine reconstruction ------------------------------------------------------

def cosine_loss(z, z_hat) -> Tensor:
    """1 - cos(z, z_hat), batch-averaged; norms are floored at 1e-12."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    z_hat = z_hat if isinstance(z_hat, Tensor) else Tensor(z_hat)
    if z.shape != z_hat.shape:
        raise ValueError(f"cosine_loss: shapes {z.shape} and {z_hat.shape} differ")
    if z.ndim == 1:
        z, z_hat = ops.reshape(z, (1, -1)), ops.reshape(z_hat, (1, -1))
    floor2 = NORM_FLOOR ** 2
    nz = ops.sqrt(ops.add(ops.sum(ops.square(z), axis=-1), floor2))
    nh = ops.sqrt(ops.add(ops.sum(ops.square(z_hat), axis=-1), floor2))
    if (nz.data <= NORM_FLOOR * 1.5).any() or (nh.data <= NORM_FLOOR * 1.5).any():
        warnings.warn("cosine_loss: zero vector encountered, norm floor applied")
    dot = ops.sum(ops.mul(z, z_hat), axis=-1)
    return ops.mean(ops.sub(1.0, ops.div(dot, ops.mul(nz, nh))))


def radial_loss(z, z_hat) -> Tensor:
    """Mean squared difference of vector norms (the part cosine loss ignores)."""
    nz = ops.sqrt(ops.add(ops.sum(ops.square(z), axis=-1), NORM_FLOOR ** 2))
    nh = ops.sqrt(ops.add(ops.sum(ops.square(z_hat), axis=-1), NORM_FLOOR ** 2))
    return ops.mean(ops.square(ops.sub(nz, nh)))


# --- second stage ---------------------------------------------------------------

@dataclass
class SecondStageConfig:
    hidden: int = 1536
    epochs: int = 40
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    norm_weight: float = 1.0
    decay: float = 0.99
    base_gamma: float = 1.0


def _stage_graph(name: str, in_name: str, k: int, hidden: int, heads: list[str]) -> ModelGraph:
    g = ModelGraph(name, {in_name: (k,)})
    g.add("dense", "fc1", units=hidden)
    g.add("activation", "relu1", fn="relu")
    g.add("dense", "fc2", units=hidden)
    g.add("activation", "relu2", fn="relu")
    g.add("concat", "skip", ["relu2", in_name])
    for h in heads:
        g.add("dense", h, "skip", units=k)
    g.set_outputs(heads)
    return g


class SecondStage:
    """VAE over first-stage codes: z -> u -> z_hat with dim(u) == dim(z).

    Both networks are two ReLU dense layers, a concatenation with the
    network input, and a final dense layer (Gaussian heads in the encoder).
    """

    def __init__(self, latent_dim: int, hidden: int = 1536, u_dim: int | None = None, seed: int = 0):
        if u_dim is not None and u_dim != latent_dim:
            raise ValueError(f"second stage needs dim(u) == dim(z), got {u_dim} vs {latent_dim}")
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.encoder = Network(_stage_graph("stage2_encoder", "z", latent_dim, hidden, ["mean", "logvar"]), seed=seed)
        self.decoder = Network(_stage_graph("stage2_decoder", "u", latent_dim, hidden, ["out"]), seed=seed + 1)
        self.trained = False
        self.history: list[dict] = []

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **self.decoder.params}

    @property
    def graphs(self) -> list[ModelGraph]:
        return [self.encoder.graph, self.decoder.graph]

    def encode(self, z) -> GaussianParams:
        mean, logvar = self.encoder(z)
        return GaussianParams(mean, logvar)

    def decode(self, u) -> Tensor:
        return self.decoder(u)

    def sample(self, n: int, seed: int = 0, noise_scale: float = 1.0) -> np.ndarray:
        """u ~ N(0, noise_scale^2 I) pushed through the second-stage decoder."""
        if not self.trained:
            raise RuntimeError("second stage is untrained")
        rng = np.random.default_rng(seed)
        u = (rng.standard_normal((n, self.latent_dim)) * noise_scale).astype(np.float32)
        with no_tape():
            return self.decode(u).data.astype(np.float64)

    def loss(self, z: np.ndarray, noise: np.ndarray, gamma: float, norm_weight: float):
        params = self.encode(z)
        u = reparametrize(params, noise)
        z_hat = self.decode(u)
        rec = cosine_loss(z, z_hat)
        if norm_weight:
            rec = ops.add(rec, ops.mul(radial_loss(Tensor(z), z_hat), norm_weight))
        kl = kl_closed_form(params)
        return rec, kl, ops.add(rec, ops.mul(kl, gamma))


def train_second_stage(z, config: SecondStageConfig | None = None) -> SecondStage:
    """Fit a second-stage VAE on codes ``z`` (n x k).

    The reconstruction term is the cosine loss plus ``norm_weight`` times
    the squared norm mismatch; the KL weight follows the running-average
    balancing rule.  Per-epoch rows ``epoch, rec, kl, gamma`` are kept in
    ``stage.history``.
    """
    cfg = config or SecondStageConfig()
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 2 or len(z) < 2:
        raise ValueError("train_second_stage needs an (n >= 2, k) code matrix")
    stage = SecondStage(z.shape[1], cfg.hidden, seed=cfg.seed)
    opt = Adam(stage.params, lr=cfg.lr)
    balance = BalanceState(cfg.decay, cfg.base_gamma)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        count = 0
        for idx in minibatches(len(z), cfg.batch_size, rng):
            zb = z[idx]
            noise = rng.standard_normal(zb.shape).astype(np.float32)
            with Tape() as tape:
                rec, kl, _ = stage.loss(zb, noise, 0.0, cfg.norm_weight)
                gamma = update_balance(balance, rec.item() / z.shape[1])
                total = ops.add(rec, ops.mul(kl, gamma))
            if not np.isfinite(total.item()):
                raise FloatingPointError(f"second stage diverged at epoch {epoch}")
            backward(tape, total, opt.params.values())
            opt.step()
            sums += [rec.item() * len(idx), kl.item() * len(idx), gamma * len(idx)]
            count += len(idx)
        row = {"epoch": epoch, "rec": float(sums[0] / count), "kl": float(sums[1] / count), "gamma": float(sums[2] / count)}
        stage.history.append(row)
        log.debug("stage2 epoch %d rec %.4f kl %.4f gamma %.4g", epoch, row["rec"], row["kl"], row["gamma"])
    stage.trained = True
    return stage


def history_csv(rows: list[dict], columns: list[str]) -> str:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns))
    return "\n".join(lines) + "\n"


# --- ancestral sampling -----------------------------------------------------------

LatentSource = Union[str, GmmModel, SecondStage, None]


def sample_latents(source: LatentSource, n: int, latent_dim: int, seed: int = 0) -> np.ndarray:
    if source is None or source == "prior":
        return np.random.default_rng(seed).standard_normal((n, latent_dim))
    if isinstance(source, GmmModel):
        if source.dim != latent_dim:
            raise ValueError(f"GMM dim {source.dim} != latent dim {latent_dim}")
        return gmm_sample(source, n, seed)
    if isinstance(source, SecondStage):
        return source.sample(n, seed)
    raise ValueError(f"unknown latent source {source!r}")


def ancestral_sample(
    source: LatentSource,
    decode: Callable[[np.ndarray], Union[Tensor, np.ndarray]],
    n: int,
    latent_dim: int,
    seed: int = 0,
    batch_size: int = 256,
) -> np.ndarray:
    """Draw codes from the prior, a fitted GMM or a second stage, then decode.

    Returns ``n`` images clipped to [0, 1].
    """
    z = sample_latents(source, n, latent_dim, seed).astype(np.float32)
    out = []
    with no_tape():
        for i in range(0, n, batch_size):
            x = decode(z[i:i + batch_size])
            out.append(np.asarray(x.data if isinstance(x, Tensor) else x))
    return np.clip(np.concatenate(out, axis=0), 0.0, 1.0)
