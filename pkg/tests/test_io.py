import logging
import struct

import numpy as np
import pytest

from greenvae.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from greenvae.config import ConfigError, TrainConfig, load_config, parse_config
from greenvae.data import DataError, load_idx, make_synthetic, write_idx
from greenvae.images import grid_canvas, read_pnm, split_grid, write_image_grid


# config

def test_config_defaults_and_sections():
    cfg = parse_config("[model]\nlatent_dim = 4\n[train]\nepochs = 3\nlr = 0.01\nbalance = no\n", env={})
    assert (cfg.latent_dim, cfg.epochs, cfg.lr, cfg.balance) == (4, 3, 0.01, False)
    assert cfg.model == "vanilla" and cfg.decay == 0.99 and cfg.base_gamma == 1.0


def test_config_top_level_keys_and_comments():
    cfg = parse_config("# comment\nseed = 7  # trailing\ngroup_dims = 4, 4\n", env={})
    assert cfg.seed == 7 and cfg.group_dims == (4, 4)


@pytest.mark.parametrize("text", [
    "[model]\nlatent = 3\n",
    "[optimizer]\nlr = 0.1\n",
    "[train]\nlatent_dim = 3\n",
    "[train]\nepochs = many\n",
    "[train]\nepochs = 0\n",
    "[train]\nlr = 2\n",
    "[model]\nmodel = gan\n",
    "[train]\nbatch_size = 1\n",
    "[data]\ndataset = idx\n",
    "[train]\nepochs = 1\nepochs = 2\n",
])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text, env={})


def test_config_seed_env_override():
    assert parse_config("seed = 3\n", env={"GREENVAE_SEED": "11"}).seed == 11
    with pytest.raises(ConfigError):
        parse_config("", env={"GREENVAE_SEED": "x"})


def test_config_text_round_trip(tmp_path):
    cfg = TrainConfig(model="hvae", latent_dim=5, lr=3e-4, film=True, groups_per_scale=(2, 1))
    p = tmp_path / "c.ini"
    p.write_text(cfg.to_text())
    assert load_config(str(p)).to_dict() == cfg.to_dict()


def test_config_overrides_win():
    assert parse_config("epochs = 3\n", {"epochs": 9}, env={}).epochs == 9


# IDX

def _idx_fixture(tmp_path):
    img = tmp_path / "img.idx"
    img.write_bytes(struct.pack(">4I", 0x803, 2, 2, 2) + bytes([0, 255, 255, 0, 0, 0, 255, 255]))
    lab = tmp_path / "lab.idx"
    lab.write_bytes(struct.pack(">2I", 0x801, 2) + bytes([3, 7]))
    return str(img), str(lab)


def test_idx_fixture_exact_pixels(tmp_path):
    h = load_idx(*_idx_fixture(tmp_path))
    assert h.shape == (2, 2, 1) and len(h) == 2
    assert h.images[..., 0].tolist() == [[[0.0, 1.0], [1.0, 0.0]], [[0.0, 0.0], [1.0, 1.0]]]
    assert h.labels.tolist() == [3, 7] and h.provenance.startswith("idx:")


def test_idx_bad_magic_names_both(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(struct.pack(">4I", 0x801, 1, 1, 1) + b"\0")
    with pytest.raises(DataError, match=r"0x00000801.*0x00000803"):
        load_idx(str(p))


def test_idx_truncated_and_mismatch(tmp_path):
    img, _ = _idx_fixture(tmp_path)
    short = tmp_path / "short.idx"
    short.write_bytes(open(img, "rb").read()[:-1])
    with pytest.raises(DataError, match="truncated"):
        load_idx(str(short))
    lab = tmp_path / "lab3.idx"
    lab.write_bytes(struct.pack(">2I", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(DataError, match="mismatch"):
        load_idx(img, str(lab))


def test_idx_write_read_round_trip(tmp_path):
    a = np.random.default_rng(0).integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    write_idx(str(tmp_path / "i"), images=a)
    write_idx(str(tmp_path / "l"), labels=np.arange(5))
    h = load_idx(str(tmp_path / "i"), str(tmp_path / "l"))
    assert h.shape == (28, 28, 1)
    assert np.array_equal(np.rint(h.images[..., 0] * 255).astype(np.uint8), a)


# synthetic

@pytest.mark.parametrize("kind", ["blobs", "rings"])
def test_synthetic_deterministic_and_in_range(kind):
    a, b = make_synthetic(kind, 50, seed=3), make_synthetic(kind, 50, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.dtype == np.float32 and a.images.min() >= 0 and a.images.max() <= 1
    assert not np.array_equal(a.images, make_synthetic(kind, 50, seed=4).images)


def test_synthetic_class_means_distinct():
    h = make_synthetic("blobs", 2000, seed=0)
    means = np.stack([h.images[h.labels == c].mean(axis=0).ravel() for c in range(10)])
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert d[~np.eye(10, dtype=bool)].min() > 0.5


def test_synthetic_errors():
    for kw in ({"n": 0}, {"n": 3, "side": 2}):
        with pytest.raises(DataError):
            make_synthetic("blobs", **kw)
    with pytest.raises(DataError):
        make_synthetic("faces", 3)


# checkpoint

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    t = {"enc.w": rng.normal(size=(3, 4, 2)).astype(np.float32), "scalar": np.float32(2.5).reshape(()),
         "nan": np.array([np.nan, -0.0, np.inf], np.float32), "ünï": np.zeros((0, 3), np.float32)}
    ck = Checkpoint(t, "seed = 1\n", {"state": [1, 2]}, {"epoch": 4})
    p = str(tmp_path / "m.gva")
    save_checkpoint(p, ck)
    back = load_checkpoint(p)
    assert list(back.tensors) == list(t)
    for k in t:
        assert back.tensors[k].tobytes() == t[k].tobytes() and back.tensors[k].shape == t[k].shape
    assert (back.config, back.rng, back.meta) == (ck.config, ck.rng, ck.meta)
    save_checkpoint(str(tmp_path / "again.gva"), back)
    assert open(p, "rb").read() == open(tmp_path / "again.gva", "rb").read()


def test_checkpoint_layout_header(tmp_path):
    p = str(tmp_path / "h.gva")
    save_checkpoint(p, Checkpoint({"a": np.array([1.0], np.float32)}))
    raw = open(p, "rb").read()
    assert raw[:4] == b"GVA1" and struct.unpack("<II", raw[4:12]) == (1, 1)
    assert raw[12:14] == b"\x01\x00" and raw[14:15] == b"a" and raw[15] == 1
    assert struct.unpack("<I", raw[16:20]) == (1,) and struct.unpack("<f", raw[20:24]) == (1.0,)


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "x.gva"
    p.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(p))
    save_checkpoint(str(p), Checkpoint({"a": np.ones((4, 4), np.float32)}))
    p.write_bytes(p.read_bytes()[:30])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(str(p))


# images

def test_white_pgm_golden(tmp_path):
    p = tmp_path / "w.pgm"
    assert write_image_grid(np.ones((1, 2, 2, 1)), 1, str(p)) == 0
    assert p.read_bytes() == b"P5\n2 2\n255\n" + b"\xff" * 4


def test_grid_arithmetic_and_ppm(tmp_path):
    imgs = np.random.default_rng(2).uniform(size=(64, 5, 7, 3))
    canvas, _ = grid_canvas(imgs, 8)
    assert canvas.shape == (8 * 5 + 7 * 2, 8 * 7 + 7 * 2, 3)
    p = str(tmp_path / "g.ppm")
    write_image_grid(imgs, 8, p)
    assert open(p, "rb").read(2) == b"P6"
    tiles = split_grid(np.rint(read_pnm(p) * 255).astype(np.uint8), 5, 7)
    assert np.array_equal(tiles, np.rint(imgs * 255).astype(np.uint8))
    assert not canvas[5:7].any()


def test_grid_clamps_and_warns(tmp_path, caplog):
    imgs = np.array([[[[-0.5], [1.5]], [[0.5], [np.nan]]]])
    with caplog.at_level(logging.WARNING):
        n = write_image_grid(imgs, 1, str(tmp_path / "c.pgm"))
    assert n == 3 and "clamped" in caplog.text
    assert (tmp_path / "c.pgm").read_bytes()[-4:] == bytes([0, 255, 128, 0])


def test_grid_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_image_grid(np.ones((1, 2, 2, 1)), 1, str(tmp_path / "missing" / "x.pgm"))
