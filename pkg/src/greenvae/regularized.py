"""Regularized autoencoder objective and its three decoder regularizers."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError

SIGMA_FLOOR = 1e-12
DEFAULT_LAMBDA = {"l2": 1e-6, "gp": 1e-4, "sn": 0.0}


@dataclass
class RaeConfig:
    reg_kind: str = "l2"
    lam: Optional[float] = None
    gamma: float = 1e-3
    gp_probes: int = 1
    gp_eps: float = 1e-2
    sn_iters: int = 1

    def __post_init__(self):
        if self.reg_kind not in DEFAULT_LAMBDA:
            raise ValueError(f"reg_kind must be one of {sorted(DEFAULT_LAMBDA)}, got {self.reg_kind!r}")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.reg_kind]
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be >= 0")
        if self.gp_probes < 1 or self.sn_iters < 1:
            raise ValueError("gp_probes and sn_iters must be >= 1")
        if self.gp_eps <= 0:
            raise ValueError("gp_eps must be positive")


@dataclass
class RaeTerms:
    rec: Tensor
    code: Tensor
    reg: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"rec": self.rec.item(), "code": self.code.item(), "reg": self.reg.item(), "total": self.total.item()}


def l2_reg(decoder_params: dict[str, Tensor] | Iterable[Tensor]) -> Tensor:
    """Sum of squared decoder weights; biases and batchnorm parameters excluded."""
    if isinstance(decoder_params, dict):
        weights = [p for k, p in decoder_params.items() if k.endswith(".kernel")]
    else:
        weights = list(decoder_params)
    total = Tensor(0.0)
    for w in weights:
        total = ops.add(total, ops.sum(ops.square(w)))
    return total


def gradient_penalty(
    decoder: Callable[[Tensor], Tensor],
    z,
    probes: int = 1,
    eps: float = 1e-2,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Hutchinson estimate of ||d decoder / d z||_F^2, batch-averaged.

    Each probe v has i.i.d. Rademacher entries; the directional derivative
    is a forward difference with step ``eps``, so the estimate is
    differentiable w.r.t. the decoder parameters with first-order backward.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    z = z if isinstance(z, Tensor) else Tensor(z)
    base = decoder(z)
    n = z.shape[0]
    total: Tensor | None = None
    for _ in range(probes):
        v = rng.choice(np.array([-1.0, 1.0], dtype=z.dtype), size=z.shape)
        shifted = decoder(ops.add(z, v * np.asarray(eps, dtype=z.dtype)))
        d = ops.mul(ops.sub(shifted, base), 1.0 / eps)
        sq = ops.sum(ops.square(ops.reshape(d, (n, -1))))
        total = sq if total is None else ops.add(total, sq)
    return ops.mul(total, 1.0 / (probes * n))


def rae_loss(x, x_hat: Tensor, z: Tensor, cfg: RaeConfig, reg: Tensor | None = None) -> RaeTerms:
    """0.5 ||x - x_hat||^2 + gamma ||z||^2 + lambda * reg, batch-averaged.

    ``reg`` is the precomputed regularizer value (``l2_reg`` or
    ``gradient_penalty``); for spectral normalization it is structural and
    contributes 0.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != x_hat.shape:
        raise ShapeError(f"rae_loss: shapes {x.shape} and {x_hat.shape} differ")
    n = x.shape[0]
    sq = ops.square(ops.sub(x, x_hat))
    rec = ops.mul(ops.mean(ops.sum(ops.reshape(sq, (n, -1)), axis=1)), 0.5)
    code = ops.mean(ops.sum(ops.square(z), axis=-1)) if z.ndim > 1 else ops.sum(ops.square(z))
    reg = reg if reg is not None else Tensor(0.0)
    total = ops.add(ops.add(rec, ops.mul(code, cfg.gamma)), ops.mul(reg, cfg.lam))
    return RaeTerms(rec, code, reg, total)


def _as_matrix(w: np.ndarray) -> np.ndarray:
    """Conv kernels (K, K, C_in, C_out) become (C_out, C_in * K^2)."""
    if w.ndim == 2:
        return w.T
    if w.ndim == 4:
        return w.reshape(-1, w.shape[-1]).T
    raise ValueError(f"cannot view weight of shape {w.shape} as a matrix")


def power_iteration(mat: np.ndarray, iters: int, u: np.ndarray | None = None, seed: int = 0):
    """Top singular triplet estimate (sigma, u, v) of ``mat`` by the power method."""
    m = np.asarray(mat, dtype=np.float64)
    if u is None:
        u = np.random.default_rng(seed).normal(size=m.shape[0])
    u = u / max(np.linalg.norm(u), SIGMA_FLOOR)
    v = np.zeros(m.shape[1])
    for _ in range(iters):
        v = m.T @ u
        v /= max(np.linalg.norm(v), SIGMA_FLOOR)
        u = m @ v
        u /= max(np.linalg.norm(u), SIGMA_FLOOR)
    return float(u @ m @ v), u, v


def krylov_top_singular(mat: np.ndarray, iters: int, u: np.ndarray | None = None, seed: int = 0):
    """Top singular triplet from the power-iteration Krylov subspace.

    Builds an orthonormal basis of span{u, G u, ..., G^(iters-1) u} with
    G = M M^T (twice reorthogonalized) and takes the Rayleigh-Ritz estimate,
    which converges far faster than the last power iterate when the
    singular-value gap is small.  Exact once iters reaches the row count.
    """
    m = np.asarray(mat, dtype=np.float64)
    rows = m.shape[0]
    if u is None:
        u = np.random.default_rng(seed).normal(size=rows)
    q = u / max(np.linalg.norm(u), SIGMA_FLOOR)
    basis, images = [], []
    for _ in range(min(iters, rows)):
        basis.append(q)
        images.append(m @ (m.T @ q))
        w = images[-1].copy()
        qs = np.array(basis)
        for _ in range(2):
            w -= qs.T @ (qs @ w)
        norm = np.linalg.norm(w)
        if norm < 1e-10 * max(np.linalg.norm(images[-1]), SIGMA_FLOOR):
            break
        q = w / norm
    qs, gq = np.array(basis).T, np.array(images).T
    h = qs.T @ gq
    evals, evecs = np.linalg.eigh(0.5 * (h + h.T))
    u = qs @ evecs[:, -1]
    u /= max(np.linalg.norm(u), SIGMA_FLOOR)
    v = m.T @ u
    v /= max(np.linalg.norm(v), SIGMA_FLOOR)
    return float(u @ m @ v), u, v


@dataclass
class SpectralNormResult:
    weight: np.ndarray
    sigma: float
    state: np.ndarray
    degenerate: bool = False


def spectral_normalize(
    weight,
    iters: int = 1,
    state: np.ndarray | None = None,
    seed: int = 0,
    method: str = "krylov",
) -> SpectralNormResult:
    """Divide ``weight`` by an iterative estimate of its largest singular value.

    ``method="power"`` returns the plain power-method iterate,
    ``"krylov"`` the Rayleigh-Ritz estimate over the same iterates.
    ``state`` is the left singular vector estimate from the previous call and
    warm-starts this one.  A zero matrix is returned unchanged with
    ``degenerate`` set.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    w = np.asarray(weight)
    if method == "power":
        sigma, u, _ = power_iteration(_as_matrix(w), iters, state, seed)
    elif method == "krylov":
        sigma, u, _ = krylov_top_singular(_as_matrix(w), iters, state, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    if sigma < SIGMA_FLOOR:
        warnings.warn("spectral_normalize: zero matrix, returned unchanged")
        return SpectralNormResult(w.copy(), SIGMA_FLOOR, u, True)
    return SpectralNormResult((w / sigma).astype(w.dtype), sigma, u)


class SpectralNorm:
    """Weight hook that spectrally normalizes kernels on every forward.

    During training one warm-started power iteration per call refreshes the
    singular vectors; sigma = u^T W v is then differentiated through with u
    and v held fixed.
    """

    def __init__(self, iters: int = 1, seed: int = 0):
        self.iters = iters
        self.seed = seed
        self.state: dict[str, np.ndarray] = {}

    def __call__(self, name: str, w: Tensor, train: bool) -> Tensor:
        mat = _as_matrix(w.data)
        u0 = self.state.get(name)
        iters = self.iters if (train or u0 is None) else 0
        if u0 is None:
            sigma, u, v = krylov_top_singular(mat, 50, None, self.seed)
        elif iters:
            sigma, u, v = power_iteration(mat, iters, u0, self.seed)
        else:
            sigma, u, v = self._reuse(mat, u0)
        self.state[name] = u
        if sigma < SIGMA_FLOOR:
            return w
        # sigma(W) = u^T W_mat v, W_mat = kernel viewed as (C_out, rest)
        if w.ndim == 2:
            outer = np.outer(v, u)
        else:
            outer = np.outer(v, u).reshape(w.shape)
        sig = ops.sum(ops.mul(w, outer.astype(w.dtype)))
        return ops.div(w, sig)

    @staticmethod
    def _reuse(mat: np.ndarray, u: np.ndarray):
        v = mat.T @ u
        v /= max(np.linalg.norm(v), SIGMA_FLOOR)
        return float(u @ mat @ v), u, v
