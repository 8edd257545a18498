"""Minibatch training loop with balancing, checkpoints and per-epoch CSV rows."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import NonFiniteError, Tape, backward
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, parse_config
from .data import DatasetHandle, load_idx, make_synthetic
from .flows import update_group_gammas
from .latent import GmmModel, SecondStage
from .models import HVAE, Model, build_model
from .optim import Adam, minibatches
from .vae import BalanceState, kl_per_variable, reconstruction_gains, variance_law

log = logging.getLogger(__name__)

EPOCH_COLUMNS = ["epoch", "rec", "kl", "gamma", "variance_law"]
GROUP_COLUMNS = ["epoch", "group", "kl", "gamma_l"]
DIAG_COLUMNS = ["latent_index", "rec_gain", "kl_per_var"]


def load_dataset(cfg: TrainConfig) -> DatasetHandle:
    if cfg.dataset == "idx":
        return load_idx(cfg.images_path, cfg.labels_path or None)
    return make_synthetic(cfg.dataset, cfg.n, cfg.side, cfg.data_seed)


def csv_text(rows: list[dict], columns: list[str]) -> str:
    """CSV with floats written by repr so reruns compare bit-exactly."""
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else str(r[c])
                              for c in columns))
    return "\n".join(lines) + "\n"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    rows: list[dict]
    group_rows: list[dict]
    aborted: bool = False
    checkpoint_path: Optional[str] = None


def dataset_moments(model: Model, images: np.ndarray, batch: int = 500) -> tuple[np.ndarray, np.ndarray]:
    ms, vs = [], []
    for i in range(0, len(images), batch):
        m, v = model.encode_moments(images[i:i + batch])
        ms.append(m)
        vs.append(v)
    return np.concatenate(ms), np.concatenate(vs)


def reconstruction_mse(model: Model, images: np.ndarray, batch: int = 500) -> float:
    total = 0.0
    for i in range(0, len(images), batch):
        xb = images[i:i + batch]
        total += float(((model.reconstruct(xb).astype(np.float64) - xb) ** 2).sum())
    return total / images.size


class Trainer:
    """Owns a model, its optimizer, balancing state and RNG stream."""

    def __init__(self, cfg: TrainConfig, data: DatasetHandle | None = None, out_dir: str | None = None):
        self.cfg = cfg
        self.data = data if data is not None else load_dataset(cfg)
        self.model = build_model(cfg, self.data.shape)
        self.opt = Adam(self.model.params, lr=cfg.lr)
        self.balance = BalanceState(cfg.decay, cfg.base_gamma) if cfg.balance else None
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.rows: list[dict] = []
        self.group_rows: list[dict] = []
        self.out_dir = out_dir
        self.gmm: GmmModel | None = None
        self.stage2: SecondStage | None = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    # -- paths --
    @property
    def checkpoint_path(self) -> str | None:
        return os.path.join(self.out_dir, "model.gva") if self.out_dir else None

    def write_reports(self) -> None:
        if not self.out_dir:
            return
        with open(os.path.join(self.out_dir, "metrics.csv"), "w") as fh:
            fh.write(csv_text(self.rows, EPOCH_COLUMNS))
        if self.group_rows:
            with open(os.path.join(self.out_dir, "groups.csv"), "w") as fh:
                fh.write(csv_text(self.group_rows, GROUP_COLUMNS))

    # -- training --
    def train_epoch(self) -> dict:
        images = self.data.images
        sums = {"rec": 0.0, "kl": 0.0, "gamma": 0.0}
        group_sum = None
        count = 0
        for idx in minibatches(len(images), self.cfg.batch_size, self.rng):
            xb = images[idx]
            with Tape() as tape:
                total, stats = self.model.objective(xb, self.rng, self.balance, train=True)
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {self.epoch + 1}")
            backward(tape, total, self.opt.params.values())
            self.opt.step()
            for k in sums:
                sums[k] += stats[k] * len(idx)
            if "group_kls" in stats:
                g = np.asarray(stats["group_kls"]) * len(idx)
                group_sum = g if group_sum is None else group_sum + g
            count += len(idx)
        self.epoch += 1
        row = {"epoch": self.epoch, **{k: float(v / count) for k, v in sums.items()}}
        means, variances = dataset_moments(self.model, images)
        row["variance_law"] = variance_law(means, variances)
        self.rows.append(row)
        if group_sum is not None and isinstance(self.model, HVAE):
            kls = group_sum / count
            gammas = update_group_gammas(self.model.groups, kls)
            for l, (kl, g) in enumerate(zip(kls, gammas)):
                self.group_rows.append({"epoch": self.epoch, "group": l, "kl": float(kl), "gamma_l": float(g)})
        log.info("epoch %d rec %.4f kl %.4f gamma %.4g vlaw %.3f", self.epoch, row["rec"], row["kl"],
                 row["gamma"], row["variance_law"])
        return row

    def run(self, epochs: int | None = None) -> TrainResult:
        target = self.cfg.epochs if epochs is None else epochs
        path = self.checkpoint_path
        while self.epoch < target:
            snapshot = self.to_checkpoint() if path else None
            try:
                self.train_epoch()
            except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
                log.error("training aborted: %s", exc)
                if path and snapshot is not None and not os.path.exists(path):
                    save_checkpoint(path, snapshot)
                self.write_reports()
                return TrainResult(self.rows, self.group_rows, True, path)
            if path and self.cfg.save_every and self.epoch % self.cfg.save_every == 0:
                self.save()
        if path:
            self.save()
        return TrainResult(self.rows, self.group_rows, False, path)

    # -- persistence --
    def to_checkpoint(self) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for k, p in self.model.params.items():
            tensors[k] = p.data.copy()
        for k, b in self.model.buffers.items():
            tensors[k] = b.copy()
        tensors.update({k: v.copy() for k, v in self.opt.state_tensors().items()})
        tensors.update(self.model.state_tensors())
        if self.gmm is not None:
            tensors.update(self.gmm.to_tensors())
        meta = {
            "epoch": self.epoch,
            "adam_t": self.opt.t,
            "input_shape": list(self.data.shape),
            "ema_rec": None if self.balance is None else self.balance.ema_rec,
            "rows": self.rows,
            "group_rows": self.group_rows,
            "model": self.model.name,
            "provenance": self.data.provenance,
        }
        if self.stage2 is not None:
            tensors.update({k: p.data.copy() for k, p in self.stage2.params.items()})
            meta["stage2_hidden"] = self.stage2.hidden
        return Checkpoint(tensors, self.cfg.to_text(), self.rng.bit_generator.state, meta)

    def save(self, path: str | None = None) -> str:
        path = path or self.checkpoint_path
        if path is None:
            raise ValueError("no checkpoint path")
        save_checkpoint(path, self.to_checkpoint())
        self.write_reports()
        return path

    def load_state(self, ckpt: Checkpoint) -> None:
        t = ckpt.tensors
        for k, p in self.model.params.items():
            p.data[...] = t[k]
        for k, b in self.model.buffers.items():
            b[...] = t[k]
        self.model.load_state_tensors(t)
        if any(k.startswith("adam.") for k in t):
            self.opt.load_state_tensors(t, ckpt.meta.get("adam_t", 0))
        self.rng.bit_generator.state = ckpt.rng
        self.epoch = int(ckpt.meta.get("epoch", 0))
        if self.balance is not None:
            self.balance.ema_rec = ckpt.meta.get("ema_rec")
        self.rows = [dict(r) for r in ckpt.meta.get("rows", [])]
        self.group_rows = [dict(r) for r in ckpt.meta.get("group_rows", [])]
        if "gmm.weights" in t:
            self.gmm = GmmModel.from_tensors(t)
        if "stage2_hidden" in ckpt.meta:
            st = SecondStage(self.model.latent_dim, int(ckpt.meta["stage2_hidden"]))
            for k, p in st.params.items():
                p.data[...] = t[k]
            st.trained = True
            self.stage2 = st

    @classmethod
    def from_checkpoint(cls, path: str, data: DatasetHandle | None = None, out_dir: str | None = None,
                        overrides: dict | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        cfg = parse_config(ckpt.config, overrides, env={})
        trainer = cls(cfg, data, out_dir)
        trainer.load_state(ckpt)
        return trainer


def diagnose(model: Model, images: np.ndarray, batch: int = 500) -> tuple[float, list[dict]]:
    """Variance law plus per-variable reconstruction gain and KL."""
    means, variances = dataset_moments(model, images, batch)
    vlaw = variance_law(means, variances)
    codes = means.astype(np.float32)
    gains = reconstruction_gains(model.decode_numpy, codes, images, batch)
    if model.stochastic:
        kls = kl_per_variable(means, np.log(np.maximum(variances, 1e-30)))
    else:
        kls = np.full(means.shape[1], np.nan)
    rows = [{"latent_index": i, "rec_gain": float(g), "kl_per_var": float(k)} for i, (g, k) in enumerate(zip(gains, kls))]
    return vlaw, rows
