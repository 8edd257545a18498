"""Inverse autoregressive flows and grouped (hierarchical) latents.

Flow steps are affine, z_t = mu_t + sigma_t * z_{t-1}, with sigma_t the
exponential of a clipped network output.  Grouped latents carry their own
KL weights, rebalanced from running per-group KL averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError
from .vae import GaussianParams, kl_closed_form

LOG_SIGMA_CLIP = 10.0
_LOG2PI = float(np.log(2 * np.pi))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class FlowStep:
    """One affine step; ``log_sigma`` is stored so sigma stays positive."""

    mu: Tensor
    log_sigma: Tensor

    @classmethod
    def from_raw(cls, mu, s) -> "FlowStep":
        """Network outputs (mu, s) with sigma = exp(clip(s, -10, 10))."""
        return cls(_t(mu), ops.clip(_t(s), -LOG_SIGMA_CLIP, LOG_SIGMA_CLIP))

    @classmethod
    def from_sigma(cls, mu, sigma) -> "FlowStep":
        sigma = np.asarray(sigma.data if isinstance(sigma, Tensor) else sigma)
        if (sigma <= 0).any():
            raise ValueError("flow step sigma must be strictly positive")
        return cls(_t(mu), Tensor(np.log(sigma)))

    @property
    def sigma(self) -> Tensor:
        return ops.exp(self.log_sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


def iaf_forward(z0, steps: Sequence[FlowStep]) -> Tensor:
    """Apply the steps in order; an empty chain returns z0."""
    z = _t(z0)
    for t, step in enumerate(steps):
        if step.dim != z.shape[-1] or step.log_sigma.shape[-1] != z.shape[-1]:
            raise ShapeError(f"flow step {t}: dim {step.dim} vs latent {z.shape[-1]}")
        z = ops.add(step.mu, ops.mul(step.sigma, z))
    return z


def fuse_steps(steps: Sequence[FlowStep]) -> FlowStep:
    """Single affine step equivalent to a chain of constant steps."""
    if not steps:
        raise ValueError("cannot fuse an empty chain")
    mu, log_sigma = steps[0].mu, steps[0].log_sigma
    for step in steps[1:]:
        mu = ops.add(step.mu, ops.mul(step.sigma, mu))
        log_sigma = ops.add(step.log_sigma, log_sigma)
    return FlowStep(mu, log_sigma)


def gaussian_log_density(z, mean, logvar) -> Tensor:
    """log N(z | mean, diag exp(logvar)), summed over the last axis."""
    z, mean, logvar = _t(z), _t(mean), _t(logvar)
    d = ops.sub(z, mean)
    quad = ops.div(ops.square(d), ops.exp(logvar))
    per = ops.mul(ops.add(ops.add(quad, logvar), _LOG2PI), -0.5)
    return ops.sum(per, axis=-1)


def iaf_log_density(log_q_z0, steps: Sequence[FlowStep]) -> Tensor:
    """log q(z_T) = log q(z_0) - sum_t sum_i log sigma_{t,i}."""
    out = _t(log_q_z0)
    for step in steps:
        out = ops.sub(out, ops.sum(step.log_sigma, axis=-1))
    return out


# --- masked autoregressive step network -----------------------------------------

def made_masks(k: int, hidden: int, reverse: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Input->hidden and hidden->output masks giving output i a dependence on inputs < i only."""
    deg_in = np.arange(1, k + 1)
    if reverse:
        deg_in = deg_in[::-1]
    deg_h = np.arange(hidden) % max(k - 1, 1) + 1
    m_in = (deg_in[:, None] <= deg_h[None, :]).astype(np.float32)
    m_out = (deg_in[None, :] > deg_h[:, None]).astype(np.float32)
    if k == 1:
        m_in[:] = 0.0
        m_out[:] = 0.0
    return m_in, m_out


class AutoregressiveStep:
    """Produces (mu_t, s_t) from context h and z_{t-1} with a masked hidden layer.

    Output i depends on z_{t-1, j} only for j earlier than i in the step's
    variable order, so the step Jacobian is triangular.
    """

    def __init__(self, name: str, k: int, context: int, hidden: int, rng: np.random.Generator, reverse: bool):
        self.name, self.k = name, k
        self.m_in, self.m_out = made_masks(k, hidden, reverse)

        def u(fan_in, shape):
            b = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-b, b, size=shape).astype(np.float32), requires_grad=True)

        self.params = {
            f"{name}.w_z": u(k, (k, hidden)),
            f"{name}.w_h": u(context, (context, hidden)),
            f"{name}.b_h": Tensor(np.zeros(hidden, np.float32), requires_grad=True),
            f"{name}.w_mu": u(hidden, (hidden, k)),
            f"{name}.b_mu": Tensor(np.zeros(k, np.float32), requires_grad=True),
            f"{name}.w_s": u(hidden, (hidden, k)),
            f"{name}.b_s": Tensor(np.zeros(k, np.float32), requires_grad=True),
        }

    def __call__(self, z: Tensor, h: Tensor) -> FlowStep:
        p = self.params
        a = ops.add(ops.matmul(z, ops.mul(p[f"{self.name}.w_z"], self.m_in)), ops.matmul(h, p[f"{self.name}.w_h"]))
        a = ops.apply_activation(ops.add(a, p[f"{self.name}.b_h"]), "swish")
        mu = ops.add(ops.matmul(a, ops.mul(p[f"{self.name}.w_mu"], self.m_out)), p[f"{self.name}.b_mu"])
        s = ops.add(ops.matmul(a, ops.mul(p[f"{self.name}.w_s"], self.m_out)), p[f"{self.name}.b_s"])
        return FlowStep.from_raw(mu, s)


# --- grouped latents --------------------------------------------------------------

@dataclass
class LatentGroups:
    dims: list[int]
    gammas: np.ndarray = None  # type: ignore[assignment]
    params: list[Optional[GaussianParams]] = field(default_factory=list)
    decay: float = 0.9
    ema_kl: Optional[np.ndarray] = None

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        if not self.dims or min(self.dims) <= 0:
            raise ValueError("group dims must be positive and nonempty")
        if self.gammas is None:
            self.gammas = np.ones(len(self.dims))
        self.gammas = np.asarray(self.gammas, dtype=np.float64)
        if self.gammas.shape != (len(self.dims),) or not np.isfinite(self.gammas).all():
            raise ValueError("need one finite gamma per group")

    @property
    def n_groups(self) -> int:
        return len(self.dims)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)


def gaussian_kl(q: GaussianParams, p: GaussianParams | None) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over dims, batch-averaged.

    ``p=None`` means the standard normal, which uses the closed form
    against N(0, I) directly.
    """
    if p is None:
        return kl_closed_form(q)
    lq, lp = q.clamped_logvar(), p.clamped_logvar()
    diff2 = ops.square(ops.sub(q.mean, p.mean))
    ratio = ops.div(ops.add(ops.exp(lq), diff2), ops.exp(lp))
    per = ops.mul(ops.sub(ops.add(ops.sub(lp, lq), ratio), 1.0), 0.5)
    return ops.mean(ops.sum(per, axis=-1)) if per.ndim > 1 else ops.sum(per)


def group_kls(posteriors: Sequence[GaussianParams], priors: Sequence[GaussianParams | None]) -> list[Tensor]:
    if len(posteriors) != len(priors):
        raise ValueError(f"{len(posteriors)} posteriors vs {len(priors)} priors")
    return [gaussian_kl(q, p) for q, p in zip(posteriors, priors)]


def hierarchical_kl(groups: LatentGroups, posteriors, priors) -> Tensor:
    """Sum over groups of gamma_l * KL(q_l || p_l)."""
    if len(posteriors) != groups.n_groups or len(priors) != groups.n_groups:
        raise ValueError(f"expected {groups.n_groups} groups, got {len(posteriors)} posteriors / {len(priors)} priors")
    total: Tensor | None = None
    for g, kl in zip(groups.gammas, group_kls(posteriors, priors)):
        term = ops.mul(kl, float(g))
        total = term if total is None else ops.add(total, term)
    return total


def update_group_gammas(groups: LatentGroups, observed_kls) -> np.ndarray:
    """gamma_l = k_l * ema_l / mean_j(k_j * ema_j), EMA decay ``groups.decay``.

    The first call seeds the averages with the observed values.  If every
    weighted average is zero all gammas become 1.
    """
    kls = np.asarray(observed_kls, dtype=np.float64)
    if kls.shape != (groups.n_groups,):
        raise ValueError(f"expected {groups.n_groups} group KLs, got shape {kls.shape}")
    if (kls < 0).any() or not np.isfinite(kls).all():
        raise ValueError("group KLs must be finite and >= 0")
    if groups.ema_kl is None:
        groups.ema_kl = kls.copy()
    else:
        groups.ema_kl = groups.decay * groups.ema_kl + (1 - groups.decay) * kls
    weighted = np.asarray(groups.dims, dtype=np.float64) * groups.ema_kl
    mean = weighted.mean()
    groups.gammas = np.ones(groups.n_groups) if mean <= 0 else weighted / mean
    return groups.gammas.copy()

