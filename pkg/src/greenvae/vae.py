"""Gaussian VAE objective, KL balancing and latent-space diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError

LOGVAR_CLAMP = 20.0


@dataclass
class GaussianParams:
    """Per-sample diagonal Gaussian: mean and log-variance, both (N, k)."""

    mean: Tensor
    logvar: Tensor

    def clamped_logvar(self) -> Tensor:
        return ops.clip(self.logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class ElboTerms:
    rec: Tensor
    kl: Tensor
    gamma: float
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"rec": self.rec.item(), "kl": self.kl.item(), "gamma": self.gamma, "total": self.total.item()}


def reparametrize(params: GaussianParams, noise) -> Tensor:
    """z = mean + exp(logvar / 2) * noise; the noise is treated as a constant."""
    noise = noise.data if isinstance(noise, Tensor) else np.asarray(noise)
    if noise.shape != params.mean.shape:
        raise ShapeError(f"reparametrize: noise {noise.shape} vs mean {params.mean.shape}")
    std = ops.exp(ops.mul(params.clamped_logvar(), 0.5))
    return ops.add(params.mean, ops.mul(std, noise.astype(params.mean.dtype)))


def kl_per_dim(params: GaussianParams) -> Tensor:
    """0.5 (mean^2 + exp(logvar) - logvar - 1), per sample and dimension."""
    lv = params.clamped_logvar()
    return ops.mul(ops.sub(ops.add(ops.square(params.mean), ops.exp(lv)), ops.add(lv, 1.0)), 0.5)


def kl_closed_form(params: GaussianParams) -> Tensor:
    """KL(q(z|x) || N(0, I)) summed over latent dims, averaged over the batch."""
    per = kl_per_dim(params)
    if per.ndim == 1:
        return ops.sum(per)
    return ops.mean(ops.sum(per, axis=-1))


def reconstruction_loss(x, x_hat) -> Tensor:
    """Pixel-summed squared error, averaged over the batch."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction: shapes {x.shape} and {x_hat.shape} differ")
    sq = ops.square(ops.sub(x, x_hat))
    per_sample = ops.sum(ops.reshape(sq, (sq.shape[0], -1)), axis=1)
    return ops.mean(per_sample)


def elbo_loss(x, x_hat: Tensor, params: GaussianParams, gamma: float) -> ElboTerms:
    """Negative ELBO split as rec + gamma * KL (minimized)."""
    rec = reconstruction_loss(x, x_hat)
    kl = kl_closed_form(params)
    total = ops.add(rec, ops.mul(kl, float(gamma))) if gamma != 0 else rec
    return ElboTerms(rec, kl, float(gamma), total)


@dataclass
class BalanceState:
    """Running average of the per-pixel reconstruction error.

    The KL weight is kept proportional to it: gamma = base_gamma * ema_rec.
    """

    decay: float = 0.99
    base_gamma: float = 1.0
    ema_rec: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise ValueError("decay must be in (0, 1)")

    @property
    def gamma(self) -> float:
        return self.base_gamma * (self.ema_rec if self.ema_rec is not None else 1.0)


def update_balance(state: BalanceState, batch_rec_per_pixel: float) -> float:
    r = float(batch_rec_per_pixel)
    if r < 0 or not np.isfinite(r):
        raise ValueError(f"reconstruction error must be finite and >= 0, got {r}")
    if state.ema_rec is None:
        state.ema_rec = r
    else:
        state.ema_rec = state.decay * state.ema_rec + (1 - state.decay) * r
    return state.base_gamma * state.ema_rec


def variance_law(all_means, all_vars) -> float:
    """Var_x[mu(x)] + E_x[sigma^2(x)], averaged over latent dimensions.

    Close to 1 when the KL term regularizes the latent space as intended.
    """
    m = np.asarray(all_means, dtype=np.float64)
    v = np.asarray(all_vars, dtype=np.float64)
    if m.size == 0 or v.size == 0:
        raise ValueError("variance_law needs at least one encoding")
    if m.shape != v.shape:
        raise ValueError(f"variance_law: means {m.shape} vs variances {v.shape}")
    return float(np.mean(m.var(axis=0) + v.mean(axis=0)))


def variance_law_per_dim(all_means, all_vars) -> np.ndarray:
    m = np.asarray(all_means, dtype=np.float64)
    v = np.asarray(all_vars, dtype=np.float64)
    return m.var(axis=0) + v.mean(axis=0)


def kl_per_variable(all_means, all_logvars) -> np.ndarray:
    """Dataset-averaged KL contribution of each latent variable."""
    m = np.asarray(all_means, dtype=np.float64)
    lv = np.clip(np.asarray(all_logvars, dtype=np.float64), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return (0.5 * (m ** 2 + np.exp(lv) - lv - 1)).mean(axis=0)


def _batched_rec(decode: Callable[[np.ndarray], np.ndarray], z: np.ndarray, data: np.ndarray, batch: int) -> float:
    total = 0.0
    for i in range(0, len(z), batch):
        xh = np.asarray(decode(z[i:i + batch]), dtype=np.float64)
        xb = np.asarray(data[i:i + batch], dtype=np.float64)
        total += float(((xb - xh) ** 2).reshape(len(xb), -1).sum(axis=1).sum())
    return total / len(z)


def reconstruction_gain(
    decode: Callable[[np.ndarray], np.ndarray],
    codes,
    data,
    latent_index: int,
    fill: float | None = None,
    batch: int = 256,
) -> float:
    """Reconstruction loss with one latent variable masked minus the loss with it active.

    ``codes`` are the encoder means of ``data``.  The masked variable is
    replaced by its dataset mean unless ``fill`` is given.
    """
    z = np.asarray(codes)
    if not 0 <= latent_index < z.shape[1]:
        raise IndexError(f"latent index {latent_index} out of range for {z.shape[1]} variables")
    data = np.asarray(data)
    masked = z.copy()
    masked[:, latent_index] = z[:, latent_index].mean() if fill is None else fill
    return _batched_rec(decode, masked, data, batch) - _batched_rec(decode, z, data, batch)


def reconstruction_gains(decode, codes, data, batch: int = 256) -> np.ndarray:
    z = np.asarray(codes)
    base = _batched_rec(decode, z, np.asarray(data), batch)
    gains = np.empty(z.shape[1])
    for i in range(z.shape[1]):
        masked = z.copy()
        masked[:, i] = z[:, i].mean()
        gains[i] = _batched_rec(decode, masked, np.asarray(data), batch) - base
    return gains
