"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_tape, shadow64


@dataclass
class GradCheckReport:
    errors: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)
    tol: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors)

    def __str__(self) -> str:
        rows = ", ".join(f"{n}={e:.2e}" for n, e in zip(self.names, self.errors))
        return f"{'PASS' if self.passed else 'FAIL'} (tol {self.tol:.0e}): {rows}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """max |a - n| scaled by the largest gradient magnitude of the tensor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(
    f: Callable[[Sequence[Tensor]], Tensor],
    values: Sequence[np.ndarray],
    index: int,
    eps: float,
    entries: np.ndarray | None = None,
) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``values[index]`` in float64."""
    base = [np.array(v, dtype=np.float64) for v in values]
    target = base[index]
    flat = target.reshape(-1)
    grad = np.zeros_like(flat)
    picks = range(flat.size) if entries is None else entries
    with shadow64(), no_tape():
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up = f([Tensor(v) for v in base]).item()
            flat[i] = orig - eps
            down = f([Tensor(v) for v in base]).item()
            flat[i] = orig
            grad[i] = (up - down) / (2 * eps)
    return grad.reshape(target.shape)


def gradient_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor | np.ndarray],
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f(params)`` with float64 central differences.

    The analytic gradient is taken at the parameters' own precision; the
    numeric oracle always runs in 64-bit shadow mode.  ``max_entries`` limits
    the entries probed per parameter (chosen with ``seed``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    values = [np.asarray(p.data if isinstance(p, Tensor) else p) for p in params]
    leaves = [Tensor(v.copy(), requires_grad=True) for v in values]
    with Tape() as tape:
        loss = f(leaves)
    grads = backward(tape, loss, leaves)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for i, leaf in enumerate(leaves):
        entries = None
        if max_entries is not None and leaf.size > max_entries:
            entries = rng.choice(leaf.size, size=max_entries, replace=False)
        num = numeric_grad(f, values, i, eps, entries)
        ana = grads[leaf]
        if entries is not None:
            num = num.reshape(-1)[entries]
            ana = ana.reshape(-1)[entries]
        report.errors.append(relative_error(ana, num))
        report.names.append(names[i] if names else f"p{i}")
    return report
