import numpy as np
import pytest

from greenvae.autodiff import Tensor
from greenvae.latent import (GmmModel, SecondStage, SecondStageConfig, ancestral_sample, collect_latents,
                             cosine_loss, gmm_fit_em, gmm_sample, history_csv, train_second_stage)
from greenvae.metrics import frechet_from_samples
from greenvae.vae import GaussianParams, variance_law


def _gauss_encoder(mean_fn, var):
    def encode(x):
        m = mean_fn(x)
        return GaussianParams(Tensor(m), Tensor(np.full_like(m, np.log(var))))
    return encode


# collecting

def test_mean_mode_on_deterministic_encoder():
    x = np.random.default_rng(0).normal(size=(700, 3))
    z = collect_latents(lambda b: Tensor(2 * b), x, mode="mean", batch_size=64)
    assert np.array_equal(z, 2 * x)


def test_sampled_with_zero_noise_is_mean():
    x = np.random.default_rng(1).normal(size=(50, 2))
    enc = _gauss_encoder(lambda b: b * 0.5, 0.3)
    a = collect_latents(enc, x, mode="mean")
    b = collect_latents(enc, x, mode="sampled", noise_scale=0.0)
    assert np.array_equal(a, b)


def test_sampled_moments_follow_variance_law():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(100_000, 2))
    enc = _gauss_encoder(lambda b: b * np.sqrt(0.6), 0.4)
    z = collect_latents(enc, x, mode="sampled", seed=3, batch_size=4096)
    law = variance_law(x * np.sqrt(0.6), np.full_like(x, 0.4))
    np.testing.assert_allclose(z.var(axis=0), law, rtol=0.02)


def test_sampled_deterministic_per_seed():
    x = np.random.default_rng(4).normal(size=(30, 2))
    enc = _gauss_encoder(lambda b: b, 1.0)
    assert np.array_equal(collect_latents(enc, x, "sampled", seed=5), collect_latents(enc, x, "sampled", seed=5))


def test_collect_empty_and_bad_mode():
    with pytest.raises(ValueError):
        collect_latents(lambda b: Tensor(b), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        collect_latents(lambda b: Tensor(b), np.zeros((3, 2)), mode="median")


# GMM

def test_gmm_single_component_is_mle():
    z = np.random.default_rng(6).normal(1.0, 2.0, size=(5000, 4))
    g = gmm_fit_em(z, 1)
    assert np.array_equal(g.means[0], z.mean(axis=0))
    assert np.array_equal(g.diag_vars[0], z.var(axis=0))
    assert g.weights.tolist() == [1.0]


def _planted(n=10_000, seed=7):
    rng = np.random.default_rng(seed)
    centres = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    lab = rng.integers(0, 3, size=n)
    return centres, centres[lab] + rng.normal(size=(n, 2))


def test_gmm_recovers_planted_means():
    centres, z = _planted()
    g = gmm_fit_em(z, 3, seed=1)
    for c in centres:
        assert np.min(np.linalg.norm(g.means - c, axis=1)) < 0.1


def test_gmm_loglik_monotone():
    _, z = _planted(3000, seed=8)
    for seed in range(5):
        h = np.array(gmm_fit_em(z, 4, seed=seed, tol=0).loglik_history)
        assert len(h) > 1
        assert (np.diff(h) >= -1e-9 * np.abs(h[1:])).all()


def test_gmm_ten_components_beats_one():
    _, z = _planted(4000, seed=9)
    g10, g1 = gmm_fit_em(z, 10, seed=0), gmm_fit_em(z, 1)
    assert abs(g10.weights.sum() - 1) < 1e-9 and (g10.diag_vars >= g10.var_floor).all()
    assert g10.log_prob(z).sum() >= g1.log_prob(z).sum()


def test_gmm_duplicates_respect_floor():
    z = np.repeat(np.random.default_rng(10).normal(size=(5, 3)), 40, axis=0)
    g = gmm_fit_em(z, 5, seed=0)
    assert (g.diag_vars >= 1e-6).all() and np.isfinite(g.log_prob(z)).all()


def test_gmm_errors():
    with pytest.raises(ValueError):
        gmm_fit_em(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        gmm_fit_em(np.zeros((3, 2)), 0)


def test_gmm_collapse_budget_exhausted():
    z = np.random.default_rng(11).normal(size=(200, 2))
    with pytest.raises(RuntimeError, match="collapsed"):
        gmm_fit_em(z, 3, min_weight=2.0, max_restarts=3)


def test_gmm_round_trip_tensors():
    g = GmmModel(np.array([0.3, 0.7]), np.array([[0.0, 1.0], [2.0, 3.0]]), np.array([[1.0, 2.0], [0.5, 0.5]]))
    back = GmmModel.from_tensors(g.to_tensors())
    np.testing.assert_allclose(back.means, g.means)
    assert set(g.to_tensors()) == {"gmm.weights", "gmm.means", "gmm.vars"}


def test_gmm_sample_collapsed_component():
    g = GmmModel(np.array([1.0]), np.array([[1.5, -2.0]]), np.zeros((1, 2)))
    s = gmm_sample(g, 100, seed=0)
    np.testing.assert_allclose(s, [[1.5, -2.0]] * 100, atol=0.01)


def test_gmm_sample_zero_weight_never_drawn():
    g = GmmModel(np.array([1.0, 0.0]), np.array([[0.0], [100.0]]), np.ones((2, 1)))
    assert gmm_sample(g, 5000, seed=1).max() < 10


def test_gmm_sample_mixture_moments():
    g = GmmModel(np.array([0.25, 0.75]), np.array([[-2.0, 1.0], [1.0, 3.0]]), np.array([[0.5, 1.0], [2.0, 0.2]]))
    s = gmm_sample(g, 100_000, seed=2)
    np.testing.assert_allclose(s.mean(axis=0), g.mean_moment(), rtol=0.02)
    np.testing.assert_allclose(s.var(axis=0), g.var_moment(), rtol=0.02)
    assert np.array_equal(gmm_sample(g, 10, seed=3), gmm_sample(g, 10, seed=3))


def test_gmm_weights_normalized():
    g = GmmModel(np.array([2.0, 2.0]), np.zeros((2, 1)), np.ones((2, 1)))
    assert g.weights.tolist() == [0.5, 0.5]


# cosine

def test_cosine_cases():
    z = np.random.default_rng(12).normal(size=(8, 5))
    assert cosine_loss(z, Tensor(z)).item() == pytest.approx(0.0, abs=1e-12)
    assert cosine_loss(z, Tensor(-z)).item() == pytest.approx(2.0, abs=1e-12)
    a, b = np.array([[1.0, 0.0]]), np.array([[0.0, 3.0]])
    assert cosine_loss(a, Tensor(b)).item() == pytest.approx(1.0)


def test_cosine_scale_invariant_and_bounded():
    rng = np.random.default_rng(13)
    z, zh = rng.normal(size=(20, 4)), rng.normal(size=(20, 4))
    base = cosine_loss(z, Tensor(zh)).item()
    assert 0 <= base <= 2
    assert cosine_loss(3.5 * z, Tensor(0.01 * zh)).item() == pytest.approx(base, rel=1e-9)


def test_cosine_zero_vector_flagged():
    with pytest.warns(UserWarning):
        v = cosine_loss(np.zeros((1, 3)), Tensor(np.ones((1, 3)))).item()
    assert np.isfinite(v)


# second stage

def test_second_stage_dim_mismatch():
    with pytest.raises(ValueError):
        SecondStage(4, 16, u_dim=3)


def test_second_stage_untrained_sample_rejected():
    with pytest.raises(RuntimeError):
        SecondStage(2, 8).sample(3)


def test_second_stage_layout():
    s = SecondStage(3, 1536)
    enc = s.encoder.graph
    dense = [l.attrs["units"] for l in enc.layers if l.kind == "dense"]
    assert dense[:2] == [1536, 1536]
    assert enc.shapes[[l.name for l in enc.layers if l.kind == "concat"][0]] == (1536 + 3,)
    assert enc.output_names == ["mean", "logvar"] and enc.shapes["mean"] == (3,)


@pytest.fixture(scope="module")
def normal_stage():
    z = np.random.default_rng(14).standard_normal((4000, 2))
    return z, train_second_stage(z, SecondStageConfig(hidden=64, epochs=15, seed=0))


@pytest.mark.xfail(strict=True, reason="running-average balancing drives gamma toward 0 on codes with no "
                   "low-dimensional structure, so the stage keeps encoding and KL/dim grows past 0.5")
def test_second_stage_normal_codes_low_kl(normal_stage):
    _, st = normal_stage
    assert st.history[-1]["kl"] / 2 < 0.5


def test_second_stage_normal_codes_moments(normal_stage):
    z, st = normal_stage
    s = st.sample(20_000, seed=1)
    np.testing.assert_allclose(np.linalg.norm(s, axis=1).mean(), np.linalg.norm(z, axis=1).mean(), rtol=0.1)
    np.testing.assert_allclose(s.std(axis=0), z.std(axis=0), rtol=0.1)
    assert np.abs(s.mean(axis=0)).max() < 0.1


def test_second_stage_zero_noise_is_deterministic(normal_stage):
    _, st = normal_stage
    a, b = st.sample(5, seed=0, noise_scale=0.0), st.sample(5, seed=99, noise_scale=0.0)
    assert np.array_equal(a, b)
    # every row decodes u = 0; BLAS may round rows differently in the last ulp
    np.testing.assert_allclose(a, np.repeat(a[:1], 5, axis=0), rtol=1e-6)


def test_second_stage_history_csv(normal_stage):
    _, st = normal_stage
    text = history_csv(st.history, ["epoch", "rec", "kl", "gamma"])
    lines = text.splitlines()
    assert lines[0] == "epoch,rec,kl,gamma" and len(lines) == 16


def test_ring_second_stage_beats_prior():
    rng = np.random.default_rng(15)
    ang = rng.uniform(0, 2 * np.pi, 5000)
    z = 3 * np.stack([np.cos(ang), np.sin(ang)], 1) + rng.normal(0, 0.1, (5000, 2))
    st = train_second_stage(z, SecondStageConfig(hidden=128, epochs=40, seed=1))
    fd_stage = frechet_from_samples(st.sample(5000, seed=2), z)
    fd_prior = frechet_from_samples(rng.standard_normal((5000, 2)), z)
    assert fd_stage < fd_prior


# ancestral

def test_prior_path_constant_decoder():
    imgs = ancestral_sample("prior", lambda z: np.full((len(z), 2, 2, 1), 0.3, np.float32), 10, 4)
    assert np.array_equal(imgs, np.full((10, 2, 2, 1), 0.3, np.float32))


def test_gmm_path_resembles_centre():
    rng = np.random.default_rng(16)
    a = rng.normal(size=(3, 12))
    decode = lambda z: 1 / (1 + np.exp(-np.asarray(z) @ a))
    codes = rng.normal(size=(50, 3))
    centre = codes[0]
    g = GmmModel(np.array([1.0]), centre[None], np.full((1, 3), 1e-4))
    imgs = ancestral_sample(g, decode, 200, 3, seed=1)
    own = ((imgs - decode(centre[None])) ** 2).mean()
    others = ((imgs - decode(codes[1:])[:, None]) ** 2).mean()
    assert own < others


def test_ancestral_deterministic_and_unit_range():
    decode = lambda z: np.tanh(np.asarray(z)) * 2
    a = ancestral_sample("prior", decode, 33, 5, seed=4, batch_size=8)
    b = ancestral_sample("prior", decode, 33, 5, seed=4, batch_size=8)
    assert np.array_equal(a, b) and a.min() >= 0 and a.max() <= 1


def test_ancestral_rejects_untrained_or_unknown():
    with pytest.raises(RuntimeError):
        ancestral_sample(SecondStage(2, 8), lambda z: z, 3, 2)
    with pytest.raises(ValueError):
        ancestral_sample("vamp", lambda z: z, 3, 2)
