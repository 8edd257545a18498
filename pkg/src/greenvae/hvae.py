"""Small hierarchical VAE with grouped latents and top-down conditional priors.

Latent groups are ordered top-down (coarse scale first).  The generative
path starts from a trainable tensor ``h``; each group has a conditional
prior computed from the current top-down state, and a posterior computed
from the matching bottom-up encoder feature plus (bidirectional mode) the
top-down state.  Sampled codes enter the decoder either by spatial
broadcast-concatenation with a 1x1 convolution, or by FiLM modulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .flows import LatentGroups, group_kls
from .layers import ModelGraph, Network, film_modulate
from .vae import GaussianParams, reparametrize

MAX_SCALES = 2
MAX_GROUPS_PER_SCALE = 3
MAX_GROUPS = 5


@dataclass
class HvaeConfig:
    input_side: int = 16
    channels: int = 1
    scales: int = 2
    groups_per_scale: Sequence[int] = (1, 1)  # coarsest scale first
    base_channels: int = 8
    latent_dims: Sequence[int] = (4, 4)
    film: bool = False
    bottom_up: bool = False

    def __post_init__(self):
        if isinstance(self.groups_per_scale, int):
            self.groups_per_scale = (self.groups_per_scale,) * self.scales
        self.groups_per_scale = tuple(int(g) for g in self.groups_per_scale)
        n = sum(self.groups_per_scale)
        if isinstance(self.latent_dims, int):
            self.latent_dims = (self.latent_dims,) * n
        self.latent_dims = tuple(int(k) for k in self.latent_dims)
        if not 1 <= self.scales <= MAX_SCALES:
            raise ValueError(f"hvae: scales must be in 1..{MAX_SCALES} at desk scale, got {self.scales}")
        if len(self.groups_per_scale) != self.scales:
            raise ValueError(f"hvae: groups_per_scale needs {self.scales} entries, got {len(self.groups_per_scale)}")
        if any(not 1 <= g <= MAX_GROUPS_PER_SCALE for g in self.groups_per_scale):
            raise ValueError(f"hvae: each scale holds 1..{MAX_GROUPS_PER_SCALE} groups, got {self.groups_per_scale}")
        if n > MAX_GROUPS:
            raise ValueError(f"hvae: at most {MAX_GROUPS} groups in total, got {n}")
        if len(self.latent_dims) != n or min(self.latent_dims) <= 0:
            raise ValueError(f"hvae: need {n} positive latent dims, got {self.latent_dims}")
        if self.base_channels <= 0 or self.channels <= 0:
            raise ValueError("hvae: channel counts must be positive")
        if self.input_side % 2 ** (self.scales + 1):
            raise ValueError(f"hvae: input_side {self.input_side} must be divisible by {2 ** (self.scales + 1)}")

    @property
    def n_groups(self) -> int:
        return sum(self.groups_per_scale)

    def group_scale(self) -> list[int]:
        """Scale index (0 = coarsest) of every group in top-down order."""
        out = []
        for s in range(self.scales):
            out += [s] * self.groups_per_scale[s]
        return out


def _cell(g: ModelGraph, x: str, prefix: str) -> str:
    """Residual cell: x + conv(swish(conv(swish(x))))."""
    c = g.shapes[x][-1]
    h = g.add("activation", f"{prefix}_a1", x, fn="swish")
    h = g.add("conv", f"{prefix}_c1", h, filters=c, kernel=3, stride=1)
    h = g.add("activation", f"{prefix}_a2", h, fn="swish")
    h = g.add("conv", f"{prefix}_c2", h, filters=c, kernel=3, stride=1)
    return g.add("add", f"{prefix}_add", [x, h])


def _gauss_head(name: str, inputs: dict, k: int) -> ModelGraph:
    g = ModelGraph(name, inputs)
    pooled = [g.add("global-avg-pool", f"gap_{n}", n) for n in inputs]
    feat = pooled[0] if len(pooled) == 1 else g.add("concat", "features", pooled)
    g.add("dense", "mean", feat, units=k)
    g.add("dense", "logvar", feat, units=k)
    g.set_outputs(["mean", "logvar"])
    return g


class HierarchicalVAE:
    """Bidirectional hierarchical VAE assembled from small graphs."""

    def __init__(self, cfg: HvaeConfig, seed: int = 0):
        self.cfg = cfg
        b, c = cfg.base_channels, cfg.channels
        width = 2 * b
        side = cfg.input_side
        top_side = side // 2 ** (cfg.scales + 1)
        self.width, self.top_side = width, top_side
        scales_of = cfg.group_scale()
        self.group_sides = [top_side * 2 ** s for s in scales_of]

        # bottom-up: conv s2 to side/2, then one stride-2 conv per scale
        enc = ModelGraph("hvae_enc", {"x": (side, side, c)})
        x = enc.add("conv", "stem", "x", filters=b, kernel=3, stride=2)
        feats_by_scale: dict[int, list[str]] = {}
        for level in range(cfg.scales):  # finest first
            s = cfg.scales - 1 - level
            x = enc.add("conv", f"down{level}", x, filters=width, kernel=3, stride=2)
            names = []
            for j in range(cfg.groups_per_scale[s]):
                x = _cell(enc, x, f"enc{level}_{j}")
                names.append(x)
            feats_by_scale[s] = names[::-1]  # deepest cell is consumed first
        feat_names = [n for s in range(cfg.scales) for n in feats_by_scale[s]]
        enc.set_outputs(feat_names)
        self.encoder = Network(enc, seed=seed)

        rng = np.random.default_rng(seed + 1)
        self.h = Tensor(rng.normal(0, 0.1, (1, top_side, top_side, width)).astype(np.float32), requires_grad=True)
        self.posts: list[Network] = []
        self.priors: list[Network | None] = []
        self.combines: list[Network] = []
        self.cells: list[Network | None] = []
        self.ups: dict[int, Network] = {}
        for l, (k, gs) in enumerate(zip(cfg.latent_dims, self.group_sides)):
            fshape = enc.shapes[feat_names[l]]
            dshape = (gs, gs, width)
            post_in = {"e": fshape} if cfg.bottom_up else {"e": fshape, "d": dshape}
            self.posts.append(Network(_gauss_head(f"hvae_post{l}", post_in, k), seed=seed + 10 + l))
            self.priors.append(None if l == 0 else Network(_gauss_head(f"hvae_prior{l}", {"d": dshape}, k), seed=seed + 20 + l))
            if cfg.film:
                g = ModelGraph(f"hvae_film{l}", {"z": (k,)})
                g.add("dense", "gamma", "z", units=width)
                g.add("dense", "beta", "z", units=width)
                g.set_outputs(["gamma", "beta"])
            else:
                g = ModelGraph(f"hvae_comb{l}", {"d": dshape, "zmap": (gs, gs, k)})
                g.add("concat", "cat", ["d", "zmap"])
                g.add("conv", "mix", "cat", filters=width, kernel=1, stride=1)
            self.combines.append(Network(g, seed=seed + 30 + l))
            if l == 0:
                self.cells.append(None)
            else:
                g = ModelGraph(f"hvae_cell{l}", {"d": dshape})
                _cell(g, "d", "r")
                self.cells.append(Network(g, seed=seed + 40 + l))
            if l + 1 < cfg.n_groups and self.group_sides[l + 1] != gs:
                g = ModelGraph(f"hvae_up{l}", {"d": dshape})
                g.add("upsample", "up", "d", factor=2)
                g.add("conv", "conv", "up", filters=width, kernel=3, stride=1)
                g.add("activation", "act", "conv", fn="swish")
                self.ups[l] = Network(g, seed=seed + 50 + l)
        last = self.group_sides[-1]
        out = ModelGraph("hvae_out", {"d": (last, last, width)})
        cur = last
        while cur * 2 < side:
            out.add("conv-transpose", f"up{cur}", filters=b, kernel=4, stride=2)
            out.add("activation", f"act{cur}", fn="swish")
            cur *= 2
        out.add("conv-transpose", "final", filters=c, kernel=4, stride=2)
        out.add("activation", "sigmoid", fn="sigmoid")
        self.output = Network(out, seed=seed + 60)
        self.groups = LatentGroups(list(cfg.latent_dims))

    # -- plumbing --
    @property
    def networks(self) -> list[Network]:
        nets = [self.encoder, *self.posts, *[p for p in self.priors if p], *self.combines,
                *[c for c in self.cells if c], *self.ups.values(), self.output]
        return nets

    @property
    def params(self) -> dict[str, Tensor]:
        out = {"hvae.h": self.h}
        for n in self.networks:
            out.update(n.params)
        return out

    @property
    def graphs(self) -> list[ModelGraph]:
        return [n.graph for n in self.networks]

    @property
    def latent_dim(self) -> int:
        return sum(self.cfg.latent_dims)

    def _combine(self, l: int, d: Tensor, z: Tensor, use_film: bool = True) -> Tensor:
        if self.cfg.film:
            if not use_film:
                return d
            g_raw, beta = self.combines[l](z)
            return film_modulate(d, ops.add(g_raw, 1.0), beta)
        n, hh, ww, _ = d.shape
        k = z.shape[-1]
        zmap = ops.broadcast_to(ops.reshape(z, (n, 1, 1, k)), (n, hh, ww, k))
        return self.combines[l](d, zmap)

    def _start(self, n: int) -> Tensor:
        return ops.broadcast_to(self.h, (n,) + self.h.shape[1:])

    def _advance(self, l: int, d: Tensor) -> Tensor:
        return self.ups[l](d) if l in self.ups else d

    # -- passes --
    def infer(self, x, noises: Sequence[np.ndarray] | None = None, use_mean: bool = False,
              use_film: bool = True):
        """Posterior pass.  Returns (x_hat, posteriors, priors, codes)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        n = x.shape[0]
        feats = self.encoder(x)
        feats = list(feats) if isinstance(feats, tuple) else [feats]
        d = self._start(n)
        posts, priors, codes = [], [], []
        for l in range(len(self.posts)):
            if l > 0:
                d = self.cells[l](d)
                mp, lvp = self.priors[l](d)
                priors.append(GaussianParams(mp, lvp))
            else:
                priors.append(None)
            mq, lvq = self.posts[l](feats[l]) if self.cfg.bottom_up else self.posts[l](feats[l], d)
            q = GaussianParams(mq, lvq)
            posts.append(q)
            if use_mean:
                z = mq
            else:
                eps = np.zeros(mq.shape, np.float32) if noises is None else noises[l]
                z = reparametrize(q, eps)
            codes.append(z)
            d = self._combine(l, d, z, use_film)
            d = self._advance(l, d)
        return self.output(d), posts, priors, codes

    def generate(self, n: int, seed: int = 0, temperature: float = 1.0) -> Tensor:
        """Ancestral sampling down the hierarchy."""
        rng = np.random.default_rng(seed)
        d = self._start(n)
        for l, k in enumerate(self.cfg.latent_dims):
            eps = (rng.standard_normal((n, k)) * temperature).astype(np.float32)
            if l == 0:
                z = Tensor(eps)
            else:
                d = self.cells[l](d)
                mp, lvp = self.priors[l](d)
                z = reparametrize(GaussianParams(mp, lvp), eps)
            d = self._advance(l, self._combine(l, d, z))
        return self.output(d)

    def decode_codes(self, codes: Sequence) -> Tensor:
        """Decode given per-group codes (used for reconstruction diagnostics)."""
        n = codes[0].shape[0]
        d = self._start(n)
        for l, z in enumerate(codes):
            z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, np.float32))
            if l > 0:
                d = self.cells[l](d)
            d = self._advance(l, self._combine(l, d, z))
        return self.output(d)

    def group_kls(self, posts, priors) -> list[Tensor]:
        return group_kls(posts, priors)


def build_hvae(scales: int = 2, groups_per_scale: Sequence[int] | int = (1, 1), base_channels: int = 8,
               latent_dims: Sequence[int] | int = 4, input_side: int = 16, channels: int = 1,
               film: bool = False, bottom_up: bool = False, seed: int = 0) -> HierarchicalVAE:
    cfg = HvaeConfig(input_side, channels, scales, groups_per_scale, base_channels, latent_dims, film, bottom_up)
    return HierarchicalVAE(cfg, seed)
