"""Quality and efficiency metrics.

Fréchet distance between feature statistics, blurriness (pixel variance),
static FLOPs / parameter counts over a :class:`ModelGraph`, and a forward
timing harness.
"""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .layers import ModelGraph, param_shapes

SYMMETRY_TOL = 1e-9
EIG_CLAMP = 1e-7


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def feature_stats(features) -> FeatureStats:
    """Empirical mean and unbiased (n - 1) covariance of an n x d matrix."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.ndim != 2:
        f = f.reshape(f.shape[0], -1)
    n = f.shape[0]
    if n < 2:
        raise ValueError(f"feature_stats needs at least 2 samples, got {n}")
    # shift by the first sample so constant columns centre to exact zeros
    shifted = f - f[0]
    mu = shifted.mean(axis=0) + f[0]
    centered = shifted - shifted.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return FeatureStats(mu, cov, n)


def matrix_sqrt_psd(c) -> np.ndarray:
    """Symmetric PSD square root via symmetric eigendecomposition.

    Eigenvalues below zero (rounding) are clamped to 0.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"matrix_sqrt_psd needs a square matrix, got {c.shape}")
    scale = max(np.abs(c).max(initial=0.0), 1.0)
    if np.abs(c - c.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise ValueError("matrix_sqrt_psd: matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    if w.size and w.min() < -EIG_CLAMP * max(w.max(), 1.0):
        warnings.warn(f"matrix_sqrt_psd: clamping negative eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    s = (v * np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)


def frechet_distance(s1: FeatureStats, s2: FeatureStats) -> float:
    """||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1^1/2 C2 C1^1/2)^1/2)."""
    if s1.dim != s2.dim:
        raise ValueError(f"frechet_distance: feature dims differ ({s1.dim} vs {s2.dim})")
    diff = s1.mean - s2.mean
    r1 = matrix_sqrt_psd(s1.cov)
    inner = r1 @ s2.cov @ r1
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    d = float(diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * np.trace(cross))
    if -1e-6 <= d < 0:
        d = 0.0
    return d


def frechet_from_samples(a, b) -> float:
    return frechet_distance(feature_stats(a), feature_stats(b))


def mse(images, reconstructions) -> float:
    """Mean squared error per pixel."""
    a = np.asarray(images, dtype=np.float64)
    b = np.asarray(reconstructions, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes {a.shape} and {b.shape} differ")
    return float(np.mean((a - b) ** 2))


def pixel_variance(images) -> float:
    """Mean over pixels of the across-batch variance."""
    x = np.asarray(images, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("pixel_variance needs a nonempty batch")
    return float((x - x[:1]).var(axis=0).mean())


def downsample_features(images, side: int = 8) -> np.ndarray:
    """Area-average images to side x side and flatten (desk-scale feature map)."""
    x = np.asarray(images, dtype=np.float64)
    n, h, w, c = x.shape
    if h % side or w % side:
        # crop to a multiple, keeping the centre
        hh, ww = h - h % side, w - w % side
        top, left = (h - hh) // 2, (w - ww) // 2
        x = x[:, top:top + hh, left:left + ww]
        h, w = hh, ww
    x = x.reshape(n, side, h // side, side, w // side, c).mean(axis=(2, 4))
    return x.reshape(n, -1)


# --- FLOPs and parameters -------------------------------------------------

FLOPS_CONVENTION = "mac=2;superlinear-only;conv-transpose:per-input-position"


@dataclass
class FlopsRow:
    name: str
    kind: str
    flops: int
    params: int


@dataclass
class FlopsReport:
    rows: list[FlopsRow] = field(default_factory=list)
    convention: str = FLOPS_CONVENTION

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def __add__(self, other: "FlopsReport") -> "FlopsReport":
        return FlopsReport(self.rows + other.rows, self.convention)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["layer", "flops", "params"])
        for r in self.rows:
            w.writerow([r.name, r.flops, r.params])
        w.writerow(["total", self.total_flops, self.total_params])
        return out.getvalue()


def _layer_flops(kind: str, attrs: dict, in_shape, out_shape, mac_flops: int) -> int:
    if kind == "dense":
        return mac_flops * in_shape[0] * out_shape[0]
    if kind == "conv":
        k = int(attrs["kernel"])
        return mac_flops * k * k * in_shape[2] * out_shape[2] * out_shape[0] * out_shape[1]
    if kind == "conv-transpose":
        # each input position scatters a K x K x C_out patch
        k = int(attrs["kernel"])
        return mac_flops * k * k * in_shape[2] * out_shape[2] * in_shape[0] * in_shape[1]
    return 0


def count_flops(graph: ModelGraph | Sequence[ModelGraph], mac_flops: int = 2) -> FlopsReport:
    """Static FLOPs of one forward pass for one input sample.

    Only superlinear layers (dense, conv, conv-transpose) are counted; a
    multiply-add costs ``mac_flops``.
    """
    graphs = [graph] if isinstance(graph, ModelGraph) else list(graph)
    report = FlopsReport(convention=FLOPS_CONVENTION.replace("mac=2", f"mac={mac_flops}"))
    for g in graphs:
        for spec in g.layers:
            ins = g.input_shapes(spec)
            if any(d is None for s in ins for d in s):
                raise ValueError(f"unresolved shapes at layer {spec.name!r}")
            params = sum(
                int(np.prod(s)) for s, trainable in param_shapes(spec, ins).values() if trainable
            )
            flops = _layer_flops(spec.kind, spec.attrs, ins[0], g.shapes[spec.name], mac_flops)
            report.rows.append(FlopsRow(f"{g.name}.{spec.name}", spec.kind, int(flops), params))
    return report


def count_params(graph: ModelGraph | Sequence[ModelGraph], include_buffers: bool = False) -> int:
    """Trainable parameters (weights, biases, batchnorm scale/shift).

    ``include_buffers`` adds the batchnorm running statistics, which some
    frameworks report in their total parameter count.
    """
    graphs = [graph] if isinstance(graph, ModelGraph) else list(graph)
    total = 0
    for g in graphs:
        for _, shape, trainable in g.param_table():
            if trainable or include_buffers:
                total += int(np.prod(shape))
    return total


SUMMARY_HEADER = ["model", "params", "FLOPS", "MSE", "REC", "GEN1", "GEN2", "GMM"]


def summary_row(model: str, params: int, flops: int, **scores) -> dict:
    row = {"model": model, "params": f"{params:,}", "FLOPS": f"{flops / 1e6:,.0f}M"}
    for key in SUMMARY_HEADER[3:]:
        v = scores.get(key)
        row[key] = "" if v is None else f"{v:.1f}"
    return row


def format_summary(rows: Sequence[dict]) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, SUMMARY_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return out.getvalue()


# --- timing -----------------------------------------------------------------

TIMING_HEADER = ["model", "batch_size", "mean_ms", "std_ms"]


@dataclass
class TimingResult:
    batch_size: int
    mean_ms: float
    std_ms: float
    reps: list[float]

    def csv_row(self, model: str) -> str:
        return f"{model},{self.batch_size},{self.mean_ms:.3f},{self.std_ms:.3f}"


def time_forward(
    forward: Callable[[np.ndarray], object],
    batch_size: int,
    reps: int = 3,
    warmup: int = 1,
    inputs: np.ndarray | None = None,
    workload: int = 10_000,
    input_shape: Sequence[int] | None = None,
    seed: int = 0,
) -> TimingResult:
    """Wall-clock time (ms) to push the whole workload through ``forward``.

    The workload is ``workload`` inputs split into batches of ``batch_size``;
    each repetition times one full pass.  Warmup passes are discarded.  BLAS
    is pinned to one thread during measurement.
    """
    if reps < 3:
        raise ValueError("time_forward needs reps >= 3")
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    if inputs is None:
        if input_shape is None:
            raise ValueError("time_forward needs inputs or input_shape")
        inputs = np.random.default_rng(seed).random((workload, *input_shape), dtype=np.float32)
    batches = [inputs[i:i + batch_size] for i in range(0, len(inputs), batch_size)]

    def one_pass() -> float:
        t0 = time.perf_counter()
        for b in batches:
            forward(b)
        return (time.perf_counter() - t0) * 1e3

    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover
        limiter = None
    try:
        for _ in range(warmup):
            one_pass()
        times = [one_pass() for _ in range(reps)]
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return TimingResult(batch_size, float(np.mean(times)), float(np.std(times, ddof=1)), times)
