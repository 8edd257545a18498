"""Command-line harness.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, load_config
from .data import DataError
from .images import read_pnm, write_image_grid
from .latent import (GmmModel, SecondStageConfig, ancestral_sample, collect_latents, gmm_fit_em,
                     history_csv, train_second_stage)
from .layers import build_vanilla_cnn, graphs_from_text, graphs_to_text
from .metrics import (TIMING_HEADER, count_flops, count_params, downsample_features, format_summary,
                      frechet_from_samples, mse, summary_row, time_forward)
from .train import DIAG_COLUMNS, Trainer, csv_text, diagnose

log = logging.getLogger("greenvae")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: str, command: str, argv: Sequence[str], inputs: Sequence[str],
                   config_text: str = "", seed: int | None = None) -> str:
    hashes = {}
    for p in inputs:
        if p and os.path.isfile(p):
            with open(p, "rb") as fh:
                hashes[p] = git_blob_hash(fh.read())
    joined = "".join(f"{k}:{v}\n" for k, v in sorted(hashes.items())) + config_text
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": seed,
        "config": config_text,
        "inputs": hashes,
        "content_hash": git_blob_hash(joined.encode("utf-8")),
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"manifest-{command}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _grid_cols(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


def _load_images_dir(path: str) -> np.ndarray:
    if not os.path.isdir(path):
        raise DataError(f"{path}: not a directory")
    arrays = []
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if name.endswith(".npy"):
            a = np.load(full)
            arrays.append(a if a.ndim == 4 else a[None])
        elif name.endswith((".pgm", ".ppm")) and not name.startswith("grid"):
            arrays.append(read_pnm(full)[None])
    if not arrays:
        raise DataError(f"{path}: no images (.npy, .pgm or .ppm) found")
    try:
        return np.concatenate(arrays, axis=0)
    except ValueError as exc:
        raise DataError(f"{path}: images have inconsistent shapes ({exc})") from None


# --- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {} if args.epochs is None else {"epochs": args.epochs}
    cfg = load_config(args.config, overrides)
    out = args.out
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, out_dir=out, overrides=overrides)
    else:
        trainer = Trainer(cfg, out_dir=out)
    result = trainer.run()
    write_manifest(out, "train", args.argv, [args.config, args.resume or "", cfg.images_path, cfg.labels_path],
                   trainer.cfg.to_text(), trainer.cfg.seed)
    print(csv_text(result.rows[-1:], ["epoch", "rec", "kl", "gamma", "variance_law"]), end="")
    if result.aborted:
        print("training aborted: non-finite loss; last finite checkpoint kept", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_sample(args) -> int:
    trainer = Trainer.from_checkpoint(args.ckpt)
    model = trainer.model
    if args.mode == "prior":
        source = "prior"
    elif args.mode == "gmm":
        if trainer.gmm is None:
            raise DataError(f"{args.ckpt}: no GMM stored; run gmm-fit first")
        source = trainer.gmm
    else:
        if trainer.stage2 is None:
            raise DataError(f"{args.ckpt}: no second stage stored; run second-stage first")
        source = trainer.stage2
    if model.name == "hvae" and args.mode == "prior":
        from .autodiff import no_tape
        with no_tape():
            images = np.clip(model.net.generate(args.n, args.seed).data, 0, 1)
    else:
        images = ancestral_sample(source, model.decode_numpy, args.n, model.latent_dim, args.seed)
    os.makedirs(args.out, exist_ok=True)
    ext = "pgm" if images.shape[-1] == 1 else "ppm"
    grid = os.path.join(args.out, f"grid.{ext}")
    write_image_grid(images, args.cols or _grid_cols(args.n), grid)
    np.save(os.path.join(args.out, "samples.npy"), images.astype(np.float32))
    write_manifest(args.out, "sample", args.argv, [args.ckpt], trainer.cfg.to_text(), args.seed)
    print(grid)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    trainer = Trainer.from_checkpoint(args.ckpt)
    x = trainer.data.images[: args.n]
    xr = trainer.model.reconstruct(x)
    os.makedirs(args.out, exist_ok=True)
    ext = "pgm" if x.shape[-1] == 1 else "ppm"
    cols = _grid_cols(len(x))
    write_image_grid(x, cols, os.path.join(args.out, f"originals.{ext}"))
    write_image_grid(xr, cols, os.path.join(args.out, f"reconstructions.{ext}"))
    np.save(os.path.join(args.out, "reconstructions.npy"), xr.astype(np.float32))
    write_manifest(args.out, "reconstruct", args.argv, [args.ckpt], trainer.cfg.to_text(), trainer.cfg.seed)
    print(f"mse,{mse(x, xr)!r}")
    return EXIT_OK


def cmd_fid(args) -> int:
    a = _load_images_dir(args.set_a)
    b = _load_images_dir(args.set_b)
    if a.shape[1:] != b.shape[1:]:
        raise DataError(f"image shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    side = args.feature_side
    d = frechet_from_samples(downsample_features(a, side), downsample_features(b, side))
    write_manifest(args.out or args.set_a, "fid", args.argv, [])
    print(f"fid,{d!r}")
    return EXIT_OK


def cmd_flops(args) -> int:
    with open(args.arch, encoding="utf-8") as fh:
        text = fh.read()
    try:
        graphs = graphs_from_text(text)
    except ValueError as exc:
        raise DataError(f"{args.arch}: {exc}") from None
    report = count_flops(graphs, mac_flops=args.mac)
    params = count_params(graphs, include_buffers=args.include_buffers)
    name = args.name or os.path.splitext(os.path.basename(args.arch))[0]
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report.to_csv())
    print(f"# convention: {report.convention}")
    print(format_summary([summary_row(name, params, report.total_flops)]), end="")
    return EXIT_OK


def cmd_arch(args) -> int:
    enc, dec = build_vanilla_cnn(args.side, args.base, args.latent, args.channels, args.layout,
                                 deterministic=args.deterministic)
    text = graphs_to_text([enc, dec])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_time(args) -> int:
    trainer = Trainer.from_checkpoint(args.ckpt)
    model = trainer.model
    from .autodiff import no_tape

    def forward(batch):
        with no_tape():
            model.reconstruct(batch)

    print(",".join(TIMING_HEADER))
    for b in args.batch:
        res = time_forward(forward, b, reps=args.reps, warmup=args.warmup, workload=args.workload,
                           input_shape=model.input_shape, seed=trainer.cfg.seed)
        print(res.csv_row(model.name))
    return EXIT_OK


def cmd_gmm_fit(args) -> int:
    trainer = Trainer.from_checkpoint(args.ckpt)
    z = collect_latents(trainer.model.encode, trainer.data.images, args.mode, trainer.cfg.seed)
    model = gmm_fit_em(z, args.k, args.iters, trainer.cfg.seed)
    trainer.gmm = model
    save_checkpoint(args.ckpt, trainer.to_checkpoint())
    write_manifest(os.path.dirname(os.path.abspath(args.ckpt)), "gmm-fit", args.argv, [args.ckpt],
                   trainer.cfg.to_text(), trainer.cfg.seed)
    print(f"gmm,k={args.k},iters={len(model.loglik_history)},loglik={model.loglik_history[-1]!r}")
    return EXIT_OK


def cmd_second_stage(args) -> int:
    trainer = Trainer.from_checkpoint(args.ckpt)
    cfg: TrainConfig = load_config(args.config) if args.config else trainer.cfg
    z = collect_latents(trainer.model.encode, trainer.data.images, "sampled", cfg.seed)
    sc = SecondStageConfig(cfg.stage2_hidden, cfg.stage2_epoch_count, cfg.stage2_batch_size, cfg.stage2_lr,
                           cfg.seed, cfg.stage2_norm_weight, cfg.decay, cfg.base_gamma)
    stage = train_second_stage(z, sc)
    trainer.stage2 = stage
    save_checkpoint(args.ckpt, trainer.to_checkpoint())
    out_dir = os.path.dirname(os.path.abspath(args.ckpt))
    with open(os.path.join(out_dir, "second_stage.csv"), "w") as fh:
        fh.write(history_csv(stage.history, ["epoch", "rec", "kl", "gamma"]))
    write_manifest(out_dir, "second-stage", args.argv, [args.ckpt, args.config or ""], cfg.to_text(), cfg.seed)
    print(history_csv(stage.history[-1:], ["epoch", "rec", "kl", "gamma"]), end="")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    trainer = Trainer.from_checkpoint(args.ckpt)
    images = trainer.data.images[: args.n] if args.n else trainer.data.images
    vlaw, rows = diagnose(trainer.model, images)
    text = csv_text(rows, DIAG_COLUMNS)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(f"variance_law,{vlaw!r}")
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="greenvae", description="Desk-scale VAE laboratory")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("train", help="train a model from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="run")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", choices=["prior", "gmm", "second-stage"], default="prior")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cols", type=int)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("reconstruct", help="reconstruct training images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("fid", help="Frechet distance between two image directories")
    s.add_argument("--set-a", required=True)
    s.add_argument("--set-b", required=True)
    s.add_argument("--feature-side", type=int, default=8)
    s.add_argument("--out")
    s.set_defaults(func=cmd_fid)

    s = sub.add_parser("flops", help="count FLOPs and parameters of an architecture file")
    s.add_argument("--arch", required=True)
    s.add_argument("--mac", type=int, default=2, choices=[1, 2])
    s.add_argument("--csv", help="write per-layer rows here")
    s.add_argument("--name")
    s.add_argument("--include-buffers", action="store_true", help="count batchnorm running statistics")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("arch", help="export a vanilla CNN architecture description")
    s.add_argument("--side", type=int, default=32)
    s.add_argument("--base", type=int, default=128)
    s.add_argument("--latent", type=int, default=128)
    s.add_argument("--channels", type=int, default=3)
    s.add_argument("--layout", choices=["figure", "mirror"], default="figure")
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_arch)

    s = sub.add_parser("time", help="forward-time a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--batch", type=int, nargs="+", default=[100, 10, 1])
    s.add_argument("--reps", type=int, default=3)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--workload", type=int, default=10_000)
    s.set_defaults(func=cmd_time)

    s = sub.add_parser("gmm-fit", help="fit an ex-post GMM on latent codes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--mode", choices=["mean", "sampled"], default="mean")
    s.set_defaults(func=cmd_gmm_fit)

    s = sub.add_parser("second-stage", help="train a second-stage VAE on latent codes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_second_stage)

    s = sub.add_parser("diagnose", help="variance law and per-variable reconstruction gain")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=0, help="use only the first N images")
    s.add_argument("--out", help="CSV path")
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("greenvae: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.argv = argv
    try:
        return args.func(args)
    except (DataError, CheckpointError, ConfigError, FileNotFoundError, IsADirectoryError, KeyError) as exc:
        print(f"greenvae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"greenvae: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
