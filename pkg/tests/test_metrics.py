import numpy as np
import pytest
from scipy.stats import ortho_group

from greenvae.layers import ModelGraph, build_vanilla_cnn
from greenvae.metrics import (FeatureStats, count_flops, count_params, downsample_features, feature_stats,
                              format_summary, frechet_distance, frechet_from_samples, matrix_sqrt_psd, mse,
                              pixel_variance, summary_row, time_forward)


def _stats(mean, cov):
    return FeatureStats(np.atleast_1d(np.asarray(mean, float)), np.atleast_2d(np.asarray(cov, float)), 100)


# feature stats

def test_feature_stats_two_points():
    s = feature_stats(np.array([[0.0, 0.0], [2.0, 2.0]]))
    assert s.mean.tolist() == [1.0, 1.0]
    assert s.cov.tolist() == [[2.0, 2.0], [2.0, 2.0]]


def test_feature_stats_constant_and_errors():
    assert not feature_stats(np.full((10, 3), 4.2)).cov.any()
    with pytest.raises(ValueError):
        feature_stats(np.zeros((1, 3)))


def test_feature_stats_normal_identity():
    s = feature_stats(np.random.default_rng(0).standard_normal((100_000, 4)))
    np.testing.assert_allclose(s.cov, np.eye(4), atol=0.03)


# matrix square root

def test_sqrt_diag_and_identity():
    np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)
    np.testing.assert_allclose(matrix_sqrt_psd(np.eye(6)), np.eye(6), atol=1e-12)


def _random_psd(d, seed):
    a = np.random.default_rng(seed).normal(size=(d, d))
    return a @ a.T


def test_sqrt_residual_64():
    for seed in range(5):
        c = _random_psd(64, seed)
        s = matrix_sqrt_psd(c)
        assert np.linalg.norm(s @ s - c) / np.linalg.norm(c) < 1e-6
        assert np.array_equal(s, s.T) and np.linalg.eigvalsh(s).min() > -1e-8


def test_sqrt_rank_deficient():
    v = np.random.default_rng(1).normal(size=(8, 3))
    c = v @ v.T
    s = matrix_sqrt_psd(c)
    assert np.linalg.norm(s @ s - c) / np.linalg.norm(c) < 1e-6


def test_sqrt_orthogonal_conjugation():
    c = _random_psd(12, 2)
    for seed in range(5):
        q = ortho_group.rvs(12, random_state=seed)
        np.testing.assert_allclose(matrix_sqrt_psd(q.T @ c @ q), q.T @ matrix_sqrt_psd(c) @ q, atol=1e-6)


def test_sqrt_asymmetric_rejected():
    with pytest.raises(ValueError):
        matrix_sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        matrix_sqrt_psd(np.ones((2, 3)))


# Frechet distance

def test_fd_one_dimensional_cases():
    assert frechet_distance(_stats(0, 1), _stats(0, 1)) == 0.0
    assert frechet_distance(_stats(0, 1), _stats(3, 1)) == pytest.approx(9.0, abs=1e-12)
    assert frechet_distance(_stats(0, 4), _stats(0, 1)) == pytest.approx(1.0, abs=1e-12)


def test_fd_symmetric_nonnegative_zero_on_equal():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = _stats(rng.normal(size=5), _random_psd(5, rng.integers(1e6)))
        b = _stats(rng.normal(size=5), _random_psd(5, rng.integers(1e6)))
        ab, ba = frechet_distance(a, b), frechet_distance(b, a)
        assert ab > 0 and ab == pytest.approx(ba, rel=1e-8)
        assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-8)


def test_fd_sampled_diagonal_gaussians():
    rng = np.random.default_rng(4)
    m1, m2 = rng.normal(size=6), rng.normal(size=6)
    s1, s2 = rng.uniform(0.5, 2, 6), rng.uniform(0.5, 2, 6)
    want = ((m1 - m2) ** 2).sum() + ((s1 - s2) ** 2).sum()
    got = frechet_from_samples(m1 + s1 * rng.standard_normal((50_000, 6)), m2 + s2 * rng.standard_normal((50_000, 6)))
    assert abs(got - want) / want < 0.02


def test_fd_matches_general_formula():
    # against the nonsymmetric product route with scipy's sqrtm
    from scipy.linalg import sqrtm
    rng = np.random.default_rng(5)
    c1, c2 = _random_psd(7, 6), _random_psd(7, 7)
    m1, m2 = rng.normal(size=7), rng.normal(size=7)
    want = ((m1 - m2) ** 2).sum() + np.trace(c1 + c2 - 2 * sqrtm(c1 @ c2).real)
    assert frechet_distance(_stats(m1, c1), _stats(m2, c2)) == pytest.approx(want, rel=1e-7)


def test_fd_dim_mismatch():
    with pytest.raises(ValueError):
        frechet_distance(_stats([0, 0], np.eye(2)), _stats([0], [[1]]))


# image statistics

def test_mse_and_pixel_variance():
    a = np.random.default_rng(6).uniform(size=(4, 3, 3, 1))
    assert mse(a, a) == 0.0
    assert mse(np.zeros((1, 2)), np.ones((1, 2))) == 1.0
    with pytest.raises(ValueError):
        mse(np.zeros(2), np.zeros(3))
    assert pixel_variance(np.repeat(a[:1], 5, axis=0)) == 0.0


def test_pixel_variance_uniform():
    x = np.random.default_rng(7).uniform(size=(20_000, 4, 4, 1))
    assert pixel_variance(x) == pytest.approx(1 / 12, rel=0.02)


def test_pixel_variance_checkerboard_pair():
    a = (np.indices((6, 6)).sum(axis=0) % 2).astype(float)[..., None]
    assert pixel_variance(np.stack([a, 1 - a])) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        pixel_variance(np.zeros((0, 2, 2, 1)))


def test_downsample_features_area_average():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    f = downsample_features(x, side=2)
    assert f.tolist() == [[2.5, 4.5, 10.5, 12.5]]
    assert downsample_features(np.zeros((3, 28, 28, 1))).shape == (3, 64)


# FLOPs and params

def test_dense_unit_counts():
    g = ModelGraph("m", {"x": (128,)})
    g.add("dense", units=64)
    assert count_flops(g).total_flops == 16_384
    assert count_params(g) == 8_256


def test_conv_unit_count():
    g = ModelGraph("m", {"x": (32, 32, 3)})
    g.add("conv", filters=128, kernel=4, stride=2)
    assert g.shapes[g.output_names[0]] == (16, 16, 128)
    assert count_flops(g).total_flops == 3_145_728
    assert count_params(g) == 6_272


def test_conv_transpose_unit_count():
    g = ModelGraph("m", {"x": (4, 4, 8)})
    g.add("conv-transpose", filters=3, kernel=4, stride=2)
    # scatter convention: one K x K x C_out patch per input position
    assert count_flops(g).total_flops == 2 * 16 * 8 * 3 * 4 * 4


def test_elementwise_layers_are_free():
    g = ModelGraph("m", {"x": (8, 8, 4)})
    g.add("batchnorm")
    g.add("activation", fn="relu")
    g.add("global-avg-pool")
    r = count_flops(g)
    assert r.total_flops == 0 and len(r.rows) == 3


def test_table_model_flops_and_params():
    enc, dec = build_vanilla_cnn(32, 128, 128)
    r = count_flops([enc, dec])
    assert abs(r.total_flops - 2_397e6) / 2_397e6 < 0.20
    assert abs(count_params([enc, dec], include_buffers=True) - 31_034_755) / 31_034_755 < 0.10
    assert r.total_params == count_params([enc, dec])


def test_flops_additive_and_rename_invariant():
    enc, dec = build_vanilla_cnn(16, 8, 4)
    both = count_flops([enc, dec])
    assert both.total_flops == count_flops(enc).total_flops + count_flops(dec).total_flops
    assert (count_flops(enc) + count_flops(dec)).total_flops == both.total_flops
    first = enc.layers[0].name
    assert count_flops(enc.renamed(**{first: "other"})).total_flops == count_flops(enc).total_flops


def test_mac_convention_switch():
    enc, _ = build_vanilla_cnn(16, 8, 4)
    r1, r2 = count_flops(enc, mac_flops=1), count_flops(enc)
    assert 2 * r1.total_flops == r2.total_flops
    assert "mac=1" in r1.convention and "mac=2" in r2.convention


def test_flops_csv_total_row():
    g = ModelGraph("m", {"x": (10,)})
    g.add("dense", name="fc", units=3)
    lines = count_flops(g).to_csv().splitlines()
    assert lines == ["layer,flops,params", "m.fc,60,33", "total,60,33"]


def test_summary_row_schema():
    text = format_summary([summary_row("cnn", 31_027_331, 2_396_000_000, MSE=0.0123)])
    assert text.splitlines() == ["model,params,FLOPS,MSE,REC,GEN1,GEN2,GMM", 'cnn,"31,027,331","2,396M",0.0,,,,']


# timing

def test_timing_protocol_checks():
    with pytest.raises(ValueError):
        time_forward(lambda b: b, 10, reps=2, input_shape=(2,))
    with pytest.raises(ValueError):
        time_forward(lambda b: b, 0, input_shape=(2,))


def test_timing_floor_and_row():
    r = time_forward(lambda b: None, 100, reps=3, workload=1000, input_shape=(4,))
    assert len(r.reps) == 3 and r.mean_ms < 50
    assert r.csv_row("null").startswith("null,100,")


def test_timing_counts_every_batch():
    seen = []
    time_forward(lambda b: seen.append(len(b)), 30, reps=3, warmup=1, workload=100, input_shape=(1,))
    assert seen == [30, 30, 30, 10] * 4
