"""Run configuration: ``key = value`` files with ``[section]`` headers."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from typing import Any

MODEL_NAMES = ("vanilla", "rae-l2", "rae-gp", "rae-sn", "iaf", "hvae")
SEED_ENV = "GREENVAE_SEED"


class ConfigError(ValueError):
    pass


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(raw).replace(" ", "").split(",") if v)


@dataclass
class TrainConfig:
    # [model]
    model: str = "vanilla"
    latent_dim: int = 16
    base_channels: int = 8
    decoder_layout: str = "figure"
    batchnorm: bool = True
    # [data]
    dataset: str = "blobs"
    n: int = 10_000
    side: int = 16
    data_seed: int = 0
    images_path: str = ""
    labels_path: str = ""
    # [train]
    epochs: int = 20
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    decay: float = 0.99
    base_gamma: float = 1.0
    balance: bool = True
    gamma: float = 1.0
    save_every: int = 0
    # [rae]
    rae_lambda: float = -1.0
    rae_gamma: float = 1e-3
    gp_probes: int = 1
    gp_eps: float = 1e-2
    sn_iters: int = 1
    # [iaf]
    flow_steps: int = 2
    flow_hidden: int = 64
    # [hvae]
    scales: int = 2
    groups_per_scale: tuple = (1, 1)
    group_dims: tuple = (8, 8)
    film: bool = False
    bottom_up: bool = False
    group_decay: float = 0.9
    # [second_stage]
    stage2_hidden: int = 1536
    stage2_epochs: int = 0
    stage2_batch_size: int = 100
    stage2_lr: float = 1e-3
    stage2_norm_weight: float = 1.0
    # [gmm]
    gmm_components: int = 10
    gmm_iters: int = 200

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.model in MODEL_NAMES, f"model must be one of {', '.join(MODEL_NAMES)}, got {self.model!r}")
        need(self.decoder_layout in ("figure", "mirror"), "decoder_layout must be 'figure' or 'mirror'")
        need(self.dataset in ("blobs", "rings", "idx"), "dataset must be blobs, rings or idx")
        need(self.dataset != "idx" or self.images_path, "dataset idx needs images_path")
        for name in ("latent_dim", "base_channels", "n", "side", "epochs", "batch_size", "gp_probes",
                     "sn_iters", "flow_hidden", "stage2_hidden", "stage2_batch_size", "gmm_components",
                     "gmm_iters", "scales"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("save_every", "flow_steps", "stage2_epochs", "data_seed", "seed"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("lr", "stage2_lr", "gp_eps"):
            need(0 < getattr(self, name) <= 1, f"{name} must be in (0, 1], got {getattr(self, name)}")
        for name in ("decay", "group_decay"):
            need(0 < getattr(self, name) < 1, f"{name} must be in (0, 1), got {getattr(self, name)}")
        need(self.base_gamma > 0 and self.gamma > 0, "base_gamma and gamma must be positive")
        need(self.rae_gamma >= 0, "rae_gamma must be >= 0")
        need(self.stage2_norm_weight >= 0, "stage2_norm_weight must be >= 0")
        need(self.batch_size >= 2, "batch_size must be >= 2 (batch normalization)")

    @property
    def stage2_epoch_count(self) -> int:
        return self.stage2_epochs or 2 * self.epochs

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for section, names in SECTIONS.items():
            lines.append(f"[{section}]")
            for name in names:
                v = getattr(self, name)
                if isinstance(v, tuple):
                    v = ",".join(str(i) for i in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{name} = {v!r}" if isinstance(v, float) else f"{name} = {v}")
            lines.append("")
        return "\n".join(lines)


SECTIONS = {
    "model": ["model", "latent_dim", "base_channels", "decoder_layout", "batchnorm"],
    "data": ["dataset", "n", "side", "data_seed", "images_path", "labels_path"],
    "train": ["epochs", "batch_size", "lr", "seed", "decay", "base_gamma", "balance", "gamma", "save_every"],
    "rae": ["rae_lambda", "rae_gamma", "gp_probes", "gp_eps", "sn_iters"],
    "iaf": ["flow_steps", "flow_hidden"],
    "hvae": ["scales", "groups_per_scale", "group_dims", "film", "bottom_up", "group_decay"],
    "second_stage": ["stage2_hidden", "stage2_epochs", "stage2_batch_size", "stage2_lr", "stage2_norm_weight"],
    "gmm": ["gmm_components", "gmm_iters"],
}
_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(name: str, raw: str):
    t = _TYPES[name]
    raw = raw.strip()
    try:
        if t == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "tuple":
            return _ints(raw)
        return raw.strip("'\"")
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {t}") from None


def parse_config(text: str, overrides: dict[str, Any] | None = None, env: dict[str, str] | None = None) -> TrainConfig:
    """Parse config text.  Unknown sections or keys are errors.

    Keys before the first header are accepted from any section.  The
    ``GREENVAE_SEED`` environment variable overrides ``seed``.
    """
    cp = configparser.ConfigParser(interpolation=None, strict=True, delimiters=("=",),
                                   comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str  # keep key case
    try:
        cp.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    values: dict[str, Any] = {}
    for section in cp.sections():
        allowed = set(_TYPES) if section == "__top__" else set(SECTIONS.get(section, ()))
        if section != "__top__" and section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in allowed:
                where = "" if section == "__top__" else f" in [{section}]"
                raise ConfigError(f"unknown config key {key!r}{where}")
            values[key] = _convert(key, raw)
    values.update(overrides or {})
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str, overrides: dict[str, Any] | None = None) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)
