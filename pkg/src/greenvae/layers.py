"""Layer descriptions, the graph executor and the architecture builders.

A :class:`ModelGraph` is a purely declarative, shape-resolved description of
a network.  It is consumed by :class:`Network` (which owns parameters and
runs the forward pass on tensors) and by the FLOPs counter in
:mod:`greenvae.metrics`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError

Shape = tuple[int, ...]

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5

# required / optional attributes per kind
_ATTRS: dict[str, tuple[set[str], set[str]]] = {
    "dense": ({"units"}, {"bias"}),
    "conv": ({"filters", "kernel", "stride"}, {"padding", "bias"}),
    "conv-transpose": ({"filters", "kernel", "stride"}, {"padding", "bias"}),
    "batchnorm": (set(), {"momentum", "epsilon"}),
    "activation": ({"fn"}, set()),
    "film": (set(), set()),
    "global-avg-pool": (set(), set()),
    "flatten": (set(), set()),
    "reshape": ({"shape"}, set()),
    "upsample": ({"factor"}, set()),
    "concat": (set(), {"axis"}),
    "add": (set(), set()),
}
LAYER_KINDS = frozenset(_ATTRS)
_MULTI_INPUT = {"film": 3, "concat": None, "add": None}
_ACTIVATIONS = {"relu", "sigmoid", "swish", "linear"}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    inputs: tuple[str, ...]
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _ATTRS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        required, optional = _ATTRS[self.kind]
        keys = set(self.attrs)
        if not required <= keys:
            raise ValueError(f"{self.kind} layer {self.name!r} missing attributes {sorted(required - keys)}")
        if keys - required - optional:
            raise ValueError(f"{self.kind} layer {self.name!r} has unknown attributes {sorted(keys - required - optional)}")
        for key in ("kernel", "stride", "factor"):
            if key in self.attrs and int(self.attrs[key]) <= 0:
                raise ValueError(f"{self.kind} layer {self.name!r}: {key} must be positive")
        for key in ("units", "filters"):
            if key in self.attrs and int(self.attrs[key]) <= 0:
                raise ValueError(f"{self.kind} layer {self.name!r}: zero-size layer ({key}={self.attrs[key]})")
        if self.kind == "activation" and self.attrs["fn"] not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.attrs['fn']!r}")

    def get(self, key, default=None):
        return self.attrs.get(key, default)


def _out_shape(spec: LayerSpec, shapes: list[Shape]) -> Shape:
    kind, a = spec.kind, spec.attrs
    x = shapes[0]
    if kind == "dense":
        if len(x) != 1:
            raise ShapeError(f"dense {spec.name!r} needs a flat input, got {x}")
        return (int(a["units"]),)
    if kind in ("conv", "conv-transpose"):
        if len(x) != 3:
            raise ShapeError(f"{kind} {spec.name!r} needs an HxWxC input, got {x}")
        k, s = int(a["kernel"]), int(a["stride"])
        pad = a.get("padding", "same")
        h, w = x[0], x[1]
        if kind == "conv":
            if pad == "same":
                return (-(-h // s), -(-w // s), int(a["filters"]))
            if h < k or w < k:
                raise ShapeError(f"conv {spec.name!r}: kernel {k} exceeds input {x}")
            return ((h - k) // s + 1, (w - k) // s + 1, int(a["filters"]))
        if pad == "same":
            return (h * s, w * s, int(a["filters"]))
        return ((h - 1) * s + k, (w - 1) * s + k, int(a["filters"]))
    if kind in ("batchnorm", "activation"):
        return x
    if kind == "film":
        c = x[-1]
        for extra in shapes[1:]:
            if extra != (c,):
                raise ShapeError(f"film {spec.name!r}: modulation shape {extra} does not match {c} channels")
        return x
    if kind == "global-avg-pool":
        if len(x) != 3:
            raise ShapeError(f"global-avg-pool {spec.name!r} needs HxWxC, got {x}")
        return (x[2],)
    if kind == "flatten":
        return (int(np.prod(x)),)
    if kind == "reshape":
        target = tuple(int(v) for v in a["shape"])
        if int(np.prod(target)) != int(np.prod(x)):
            raise ShapeError(f"reshape {spec.name!r}: cannot view {x} as {target}")
        return target
    if kind == "upsample":
        f = int(a["factor"])
        return (x[0] * f, x[1] * f, x[2])
    if kind == "concat":
        ax = int(a.get("axis", -1)) % len(x)
        for s in shapes[1:]:
            if len(s) != len(x) or any(s[i] != x[i] for i in range(len(x)) if i != ax):
                raise ShapeError(f"concat {spec.name!r}: incompatible shapes {x} and {s}")
        out = list(x)
        out[ax] = sum(s[ax] for s in shapes)
        return tuple(out)
    if kind == "add":
        for s in shapes[1:]:
            if s != x:
                raise ShapeError(f"add {spec.name!r}: shapes {x} and {s} differ")
        return x
    raise AssertionError(kind)


def param_shapes(spec: LayerSpec, in_shapes: Sequence[Shape]) -> dict[str, tuple[Shape, bool]]:
    """Parameter tensors of a layer: suffix -> (shape, trainable)."""
    a = spec.attrs
    x = in_shapes[0]
    out: dict[str, tuple[Shape, bool]] = {}
    if spec.kind == "dense":
        out["kernel"] = ((x[0], int(a["units"])), True)
        if a.get("bias", True):
            out["bias"] = ((int(a["units"]),), True)
    elif spec.kind == "conv":
        k = int(a["kernel"])
        out["kernel"] = ((k, k, x[2], int(a["filters"])), True)
        if a.get("bias", True):
            out["bias"] = ((int(a["filters"]),), True)
    elif spec.kind == "conv-transpose":
        k = int(a["kernel"])
        out["kernel"] = ((k, k, int(a["filters"]), x[2]), True)
        if a.get("bias", True):
            out["bias"] = ((int(a["filters"]),), True)
    elif spec.kind == "batchnorm":
        c = x[-1]
        out["scale"] = ((c,), True)
        out["shift"] = ((c,), True)
        out["running_mean"] = ((c,), False)
        out["running_var"] = ((c,), False)
    return out


class ModelGraph:
    """Ordered, acyclic, shape-resolved layer list with named inputs/outputs.

    Layers are appended with :meth:`add`; each new layer reads the previous
    layer unless ``inputs`` is given.  Shapes are resolved eagerly, so an
    inconsistent graph fails at build time.
    """

    def __init__(self, name: str, inputs: dict[str, Shape]):
        if not inputs:
            raise ValueError("a graph needs at least one input")
        self.name = name
        self.inputs: dict[str, Shape] = {k: tuple(int(d) for d in v) for k, v in inputs.items()}
        for k, v in self.inputs.items():
            if any(d <= 0 for d in v):
                raise ValueError(f"input {k!r} has non-positive extent {v}")
        self.layers: list[LayerSpec] = []
        self.shapes: dict[str, Shape] = dict(self.inputs)
        self.outputs: list[str] = []
        self._last = next(iter(self.inputs))
        self._param_count: Optional[int] = None

    def add(self, kind: str, name: str | None = None, inputs: str | Sequence[str] | None = None, **attrs) -> str:
        if name is None:
            name = f"{kind.replace('-', '_')}{len(self.layers)}"
        if name in self.shapes:
            raise ValueError(f"duplicate layer name {name!r}")
        if inputs is None:
            inputs = (self._last,)
        elif isinstance(inputs, str):
            inputs = (inputs,)
        inputs = tuple(inputs)
        for i in inputs:
            if i not in self.shapes:
                raise ValueError(f"layer {name!r} reads unknown tensor {i!r}")
        want = _MULTI_INPUT.get(kind, 1)
        if want is not None and len(inputs) != want:
            raise ValueError(f"{kind} layer {name!r} takes {want} inputs, got {len(inputs)}")
        spec = LayerSpec(kind, name, inputs, dict(attrs))
        self.shapes[name] = _out_shape(spec, [self.shapes[i] for i in inputs])
        self.layers.append(spec)
        self._last = name
        self._param_count = None
        return name

    def set_outputs(self, names: str | Sequence[str]) -> None:
        names = [names] if isinstance(names, str) else list(names)
        for n in names:
            if n not in self.shapes:
                raise ValueError(f"unknown output {n!r}")
        self.outputs = names

    @property
    def output_names(self) -> list[str]:
        return self.outputs or [self._last]

    def input_shapes(self, spec: LayerSpec) -> list[Shape]:
        return [self.shapes[i] for i in spec.inputs]

    def param_table(self) -> list[tuple[str, Shape, bool]]:
        rows = []
        for spec in self.layers:
            for suffix, (shape, trainable) in param_shapes(spec, self.input_shapes(spec)).items():
                rows.append((f"{spec.name}.{suffix}", shape, trainable))
        return rows

    def param_count(self) -> int:
        if self._param_count is None:
            self._param_count = sum(int(np.prod(s)) for _, s, t in self.param_table() if t)
        return self._param_count

    def renamed(self, **renames: str) -> "ModelGraph":
        """Copy with layers renamed (used to check FLOPs invariance)."""
        mapping = {k: renames.get(k, k) for k in self.shapes}
        g = ModelGraph(self.name, {mapping[k]: v for k, v in self.inputs.items()})
        for spec in self.layers:
            g.add(spec.kind, mapping[spec.name], [mapping[i] for i in spec.inputs], **spec.attrs)
        g.set_outputs([mapping[o] for o in self.output_names])
        return g

    def __repr__(self) -> str:
        return f"ModelGraph({self.name!r}, {len(self.layers)} layers, {self.param_count()} params)"


# --- text serialization ---------------------------------------------------

def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(int(d)) for d in v)
    return str(v)


def _parse_value(key: str, raw: str):
    if key == "shape":
        return tuple(int(d) for d in raw.split(","))
    if key in ("units", "filters", "kernel", "stride", "factor", "axis"):
        return int(raw)
    if key == "bias":
        return raw.lower() in ("1", "true", "yes")
    if key in ("momentum", "epsilon"):
        return float(raw)
    return raw


def graphs_to_text(graphs: Iterable[ModelGraph]) -> str:
    """One layer per line: kind, name, then space-separated key=value attributes."""
    lines = []
    for g in graphs:
        lines.append(f"graph {g.name}")
        for name, shape in g.inputs.items():
            lines.append(f"input {name} {_fmt_value(shape)}")
        for spec in g.layers:
            parts = [spec.kind, spec.name, "in=" + ",".join(spec.inputs)]
            parts += [f"{k}={_fmt_value(v)}" for k, v in spec.attrs.items()]
            lines.append(" ".join(parts))
        lines.append("output " + ",".join(g.output_names))
    return "\n".join(lines) + "\n"


def graphs_from_text(text: str) -> list[ModelGraph]:
    graphs: list[ModelGraph] = []
    name: str | None = None
    pending_inputs: dict[str, Shape] = {}
    current: ModelGraph | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            if head == "graph":
                name, pending_inputs, current = rest[0], {}, None
            elif head == "input":
                pending_inputs[rest[0]] = _parse_value("shape", rest[1])
            elif head == "output":
                if current is None:
                    raise ValueError("output before any layer")
                current.set_outputs(rest[0].split(","))
            else:
                if current is None:
                    if name is None:
                        raise ValueError("layer outside a graph block")
                    current = ModelGraph(name, pending_inputs)
                    graphs.append(current)
                lname, attrs, inputs = rest[0], {}, None
                for tok in rest[1:]:
                    key, _, value = tok.partition("=")
                    if key == "in":
                        inputs = value.split(",")
                    else:
                        attrs[key] = _parse_value(key, value)
                current.add(head, lname, inputs, **attrs)
        except (IndexError, ValueError) as exc:
            raise ValueError(f"architecture line {lineno}: {exc}") from None
    return graphs


# --- functional layers ------------------------------------------------------

def film_modulate(features, gamma, beta) -> Tensor:
    """Per-channel affine modulation: out[..., c] = gamma[c] * features[..., c] + beta[c].

    ``gamma``/``beta`` are ``(C,)`` or per-sample ``(N, C)``.
    """
    features, gamma, beta = (v if isinstance(v, Tensor) else Tensor(v) for v in (features, gamma, beta))
    c = features.shape[-1]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ShapeError(
            f"film: features have {c} channels, modulation has {gamma.shape[-1]}/{beta.shape[-1]}"
        )
    if gamma.ndim == 2 and features.ndim == 4:
        gamma = ops.reshape(gamma, (gamma.shape[0], 1, 1, c))
    if beta.ndim == 2 and features.ndim == 4:
        beta = ops.reshape(beta, (beta.shape[0], 1, 1, c))
    return ops.add(ops.mul(features, gamma), beta)


@dataclass
class BatchNormState:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON


def batchnorm_forward(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalize over every axis except channels.

    Train mode uses batch statistics and updates the running averages in
    ``state``; eval mode uses the running averages.
    """
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2 (degenerate variance)")
        mu = ops.mean(x, axis=axes, keepdims=True)
        centered = ops.sub(x, mu)
        var = ops.mean(ops.square(centered), axis=axes, keepdims=True)
        xhat = ops.div(centered, ops.sqrt(ops.add(var, state.epsilon)))
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mu.data.reshape(-1)
        state.running_var[...] = m * state.running_var + (1 - m) * var.data.reshape(-1)
    elif mode == "eval":
        mu = state.running_mean.astype(x.dtype)
        inv = (1.0 / np.sqrt(state.running_var + state.epsilon)).astype(x.dtype)
        xhat = ops.mul(ops.sub(x, mu), inv)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return ops.add(ops.mul(xhat, state.scale), state.shift)


# --- parameters -------------------------------------------------------------

def init_params(graph: ModelGraph, seed: int = 0, dtype=np.float32) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Fan-in scaled uniform initialization: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Biases and batchnorm shifts start at 0, batchnorm scales at 1, running
    variances at 1.  Returns (trainable params, buffers) keyed
    ``"<graph>.<layer>.<suffix>"``.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for spec in graph.layers:
        for suffix, (shape, trainable) in param_shapes(spec, graph.input_shapes(spec)).items():
            key = f"{graph.name}.{spec.name}.{suffix}"
            if suffix == "kernel":
                if spec.kind == "dense":
                    fan_in = shape[0]
                elif spec.kind == "conv":
                    fan_in = shape[0] * shape[1] * shape[2]
                else:
                    fan_in = shape[0] * shape[1] * shape[3]
                bound = 1.0 / math.sqrt(fan_in)
                value = rng.uniform(-bound, bound, size=shape)
            elif suffix in ("scale", "running_var"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            value = value.astype(dtype)
            if trainable:
                params[key] = Tensor(value, requires_grad=True, name=key)
            else:
                buffers[key] = value
    return params, buffers


WeightHook = Callable[[str, Tensor, bool], Tensor]


class Network:
    """Executes a :class:`ModelGraph` on tensors with owned parameters."""

    def __init__(
        self,
        graph: ModelGraph,
        seed: int = 0,
        params: dict[str, Tensor] | None = None,
        buffers: dict[str, np.ndarray] | None = None,
        weight_hook: WeightHook | None = None,
    ):
        self.graph = graph
        if params is None:
            params, fresh_buffers = init_params(graph, seed)
            buffers = fresh_buffers if buffers is None else buffers
        self.params = params
        self.buffers = buffers or {}
        self.weight_hook = weight_hook

    def _p(self, spec: LayerSpec, suffix: str) -> Tensor:
        return self.params[f"{self.graph.name}.{spec.name}.{suffix}"]

    def _weight(self, spec: LayerSpec, train: bool) -> Tensor:
        w = self._p(spec, "kernel")
        if self.weight_hook is not None:
            w = self.weight_hook(f"{self.graph.name}.{spec.name}.kernel", w, train)
        return w

    def bn_state(self, spec: LayerSpec) -> BatchNormState:
        base = f"{self.graph.name}.{spec.name}."
        return BatchNormState(
            self.params[base + "scale"],
            self.params[base + "shift"],
            self.buffers[base + "running_mean"],
            self.buffers[base + "running_var"],
            float(spec.get("momentum", BN_MOMENTUM)),
            float(spec.get("epsilon", BN_EPSILON)),
        )

    def run_layer(self, spec: LayerSpec, xs: list[Tensor], train: bool) -> Tensor:
        kind, a = spec.kind, spec.attrs
        x = xs[0]
        if kind == "dense":
            y = ops.matmul(x, self._weight(spec, train))
            return ops.add(y, self._p(spec, "bias")) if a.get("bias", True) else y
        if kind == "conv":
            y = ops.conv2d(x, self._weight(spec, train), int(a["stride"]), a.get("padding", "same"))
            return ops.add(y, self._p(spec, "bias")) if a.get("bias", True) else y
        if kind == "conv-transpose":
            y = ops.conv_transpose2d(x, self._weight(spec, train), int(a["stride"]), a.get("padding", "same"))
            return ops.add(y, self._p(spec, "bias")) if a.get("bias", True) else y
        if kind == "batchnorm":
            return batchnorm_forward(x, self.bn_state(spec), "train" if train else "eval")
        if kind == "activation":
            return ops.apply_activation(x, a["fn"])
        if kind == "film":
            return film_modulate(x, xs[1], xs[2])
        if kind == "global-avg-pool":
            return ops.global_avg_pool(x)
        if kind == "flatten":
            return ops.flatten(x)
        if kind == "reshape":
            return ops.reshape(x, (x.shape[0],) + tuple(a["shape"]))
        if kind == "upsample":
            return ops.upsample(x, int(a["factor"]))
        if kind == "concat":
            axis = int(a.get("axis", -1))
            return ops.concat(xs, axis=axis if axis < 0 else axis + 1)
        if kind == "add":
            y = xs[0]
            for other in xs[1:]:
                y = ops.add(y, other)
            return y
        raise AssertionError(kind)

    def forward(self, *args, train: bool = False, return_all: bool = False, **kwargs):
        """Run the graph.  Inputs by position (graph input order) or by name.

        Returns a single tensor for single-output graphs, else a tuple.
        """
        names = list(self.graph.inputs)
        env: dict[str, Tensor] = {}
        for n, v in zip(names, args):
            env[n] = v if isinstance(v, Tensor) else Tensor(v)
        for n, v in kwargs.items():
            env[n] = v if isinstance(v, Tensor) else Tensor(v)
        for n in names:
            if n not in env:
                raise ValueError(f"missing graph input {n!r}")
            want = self.graph.inputs[n]
            if tuple(env[n].shape[1:]) != want:
                raise ShapeError(f"{self.graph.name}: input {n!r} expects (N, {want}), got {env[n].shape}")
        for spec in self.graph.layers:
            env[spec.name] = self.run_layer(spec, [env[i] for i in spec.inputs], train)
        if return_all:
            return env
        outs = tuple(env[o] for o in self.graph.output_names)
        return outs[0] if len(outs) == 1 else outs

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def weight_matrices(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.endswith(".kernel")}


# --- builders ---------------------------------------------------------------

def scale_block(g: ModelGraph, x: str, n_blocks: int = 1, activation: str = "relu",
                kernel: int = 3, prefix: str = "sb") -> str:
    """Residual blocks (batchnorm -> act -> conv, twice, plus skip) at one scale."""
    channels = g.shapes[x][-1]
    for b in range(n_blocks):
        p = f"{prefix}{b}"
        h = g.add("batchnorm", f"{p}_bn1", x)
        h = g.add("activation", f"{p}_act1", h, fn=activation)
        h = g.add("conv", f"{p}_conv1", h, filters=channels, kernel=kernel, stride=1)
        h = g.add("batchnorm", f"{p}_bn2", h)
        h = g.add("activation", f"{p}_act2", h, fn=activation)
        h = g.add("conv", f"{p}_conv2", h, filters=channels, kernel=kernel, stride=1)
        x = g.add("add", f"{p}_add", [x, h])
    return x


def build_vanilla_cnn(
    input_side: int,
    base_channels: int,
    latent_dim: int,
    channels: int = 3,
    decoder_layout: str = "figure",
    batchnorm: bool = True,
    deterministic: bool = False,
) -> tuple[ModelGraph, ModelGraph]:
    """Convolutional encoder/decoder pair with kernel 4 and ReLU everywhere.

    The encoder runs four stride-2 convolutions with base, 2*base, 4*base
    and 8*base channels, flattens, and ends in two dense heads (``mean``,
    ``logvar``) or, with ``deterministic``, a single ``z`` head.

    ``decoder_layout="figure"`` maps z by a dense layer to a
    (side/4, side/4, 8*base) map followed by two stride-2 transposed
    convolutions (4*base, 2*base) and a stride-1 transposed convolution to
    ``channels`` with a sigmoid.  ``"mirror"`` instead uses four stride-2
    transposed convolutions starting from (side/16, side/16, 8*base).
    """
    if base_channels <= 0 or latent_dim <= 0 or channels <= 0:
        raise ValueError("base_channels, latent_dim and channels must be positive")
    if decoder_layout == "figure":
        if input_side % 4:
            raise ValueError(f"input_side {input_side} must be divisible by 4")
    elif decoder_layout == "mirror":
        if input_side % 16:
            raise ValueError(f"input_side {input_side} must be divisible by 2^4 for the mirror decoder")
    else:
        raise ValueError(f"unknown decoder layout {decoder_layout!r}")

    enc = ModelGraph("encoder", {"x": (input_side, input_side, channels)})
    for i in range(4):
        enc.add("conv", f"conv{i + 1}", filters=base_channels * 2 ** i, kernel=4, stride=2)
        if batchnorm:
            enc.add("batchnorm", f"bn{i + 1}")
        enc.add("activation", f"relu{i + 1}", fn="relu")
    flat = enc.add("flatten", "flatten")
    if deterministic:
        enc.add("dense", "z", flat, units=latent_dim)
        enc.set_outputs(["z"])
    else:
        enc.add("dense", "mean", flat, units=latent_dim)
        enc.add("dense", "logvar", flat, units=latent_dim)
        enc.set_outputs(["mean", "logvar"])

    top = 8 * base_channels
    dec = ModelGraph("decoder", {"z": (latent_dim,)})
    if decoder_layout == "figure":
        side0, stages = input_side // 4, [4 * base_channels, 2 * base_channels]
    else:
        side0, stages = input_side // 16, [4 * base_channels, 2 * base_channels, base_channels]
    dec.add("dense", "fc", units=side0 * side0 * top)
    dec.add("reshape", "unflatten", shape=(side0, side0, top))
    if batchnorm:
        dec.add("batchnorm", "bn0")
    dec.add("activation", "relu0", fn="relu")
    for i, ch in enumerate(stages):
        dec.add("conv-transpose", f"convt{i + 1}", filters=ch, kernel=4, stride=2)
        if batchnorm:
            dec.add("batchnorm", f"bn{i + 1}")
        dec.add("activation", f"relu{i + 1}", fn="relu")
    last_stride = 1 if decoder_layout == "figure" else 2
    dec.add("conv-transpose", "out", filters=channels, kernel=4, stride=last_stride)
    dec.add("activation", "sigmoid", fn="sigmoid")
    return enc, dec


def build_mlp(name: str, in_dim: int, hidden: Sequence[int], out_dim: int,
              activation: str = "relu", out_activation: str = "linear") -> ModelGraph:
    g = ModelGraph(name, {"x": (in_dim,)})
    for i, h in enumerate(hidden):
        g.add("dense", f"fc{i + 1}", units=h)
        g.add("activation", f"act{i + 1}", fn=activation)
    g.add("dense", "out", units=out_dim)
    if out_activation != "linear":
        g.add("activation", "out_act", fn=out_activation)
    return g
