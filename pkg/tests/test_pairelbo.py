import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlcert.pairelbo import (
    PairBatch,
    ToyVae,
    TrainingDivergedError,
    average_normals,
    bernoulli_recon_loss,
    export_latents,
    gaussian_kl,
    latent_grid,
    loss_and_gradient,
    masked_pair_statistics,
    pairwise_elbo_loss,
    roundtrip_consistency,
    toy_train,
    write_loss_trace,
)
from dlcert.simstudy import gen_toy_disentangled
from dlcert.statdist import Normal

finite = st.floats(-5, 5)
positive = st.floats(0.05, 5)


def test_average_examples():
    assert average_normals(Normal(0, 1), Normal(2, 3)) == Normal(1, 2)
    assert average_normals(Normal(1, 1), Normal(-1, 1)) == Normal(0, 1)


@given(finite, positive, finite, positive)
def test_average_commutative_idempotent(m1, s1, m2, s2):
    a, b = Normal(m1, s1), Normal(m2, s2)
    assert average_normals(a, b) == average_normals(b, a)
    assert average_normals(a, a) == a


def test_masked_statistics_examples():
    mu_l, s_l = np.array([0.0, 1.0, 2.0, 3.0]), np.array([1.0, 1.0, 1.0, 1.0])
    mu_r, s_r = np.array([1.0, 1.0, 0.0, 5.0]), np.array([3.0, 1.0, 1.0, 2.0])
    a = masked_pair_statistics(mu_l, s_l, mu_r, s_r, {0, 1, 2, 3})
    np.testing.assert_array_equal(a[0], a[2])
    np.testing.assert_array_equal(a[0], (mu_l + mu_r) / 2)
    np.testing.assert_array_equal(a[1], (s_l + s_r) / 2)
    b = masked_pair_statistics(mu_l, s_l, mu_r, s_r, {3})
    np.testing.assert_array_equal(b[0], [0.0, 1.0, 2.0, 4.0])
    np.testing.assert_array_equal(b[3], [3.0, 1.0, 1.0, 1.5])
    c = masked_pair_statistics(mu_l, s_l, mu_l, s_l, {1})
    for got, want in zip(c, (mu_l, s_l, mu_l, s_l)):
        np.testing.assert_array_equal(got, want)
    with pytest.raises(ValueError):
        masked_pair_statistics(mu_l, s_l, mu_r, s_r, {4})
    with pytest.raises(ValueError):
        masked_pair_statistics(mu_l, s_l, mu_r, s_r, set())


def test_kl_examples():
    assert gaussian_kl([0.0], [1.0]) == 0.0
    assert gaussian_kl([1.0], [1.0]) == 0.5
    assert gaussian_kl([0.0], [2.0]) == pytest.approx(0.5 * (4 - 2 * math.log(2) - 1), rel=1e-15)
    assert gaussian_kl([0.0], [2.0]) == pytest.approx(0.80685, abs=1e-5)
    with pytest.raises(ValueError):
        gaussian_kl([0.0], [0.0])


def test_kl_against_quadrature():
    mu, sigma, lam = 0.7, 0.4, 2.0
    p = lambda x: mpmath.npdf(x, mu, sigma)
    q = lambda x: mpmath.npdf(x, 0, mpmath.sqrt(lam))
    oracle = mpmath.quad(lambda x: p(x) * mpmath.log(p(x) / q(x)), [-mpmath.inf, mu, mpmath.inf])
    assert gaussian_kl([mu], [sigma], lam) == pytest.approx(float(oracle), rel=1e-12)


@settings(max_examples=50)
@given(st.lists(st.tuples(finite, positive), min_size=1, max_size=5))
def test_kl_nonnegative(pairs):
    mu, sigma = np.array(pairs).T
    kl = gaussian_kl(mu, sigma)
    assert kl >= -1e-12
    if kl == 0.0:
        np.testing.assert_allclose(mu, 0, atol=1e-6)


def test_bce_examples():
    assert bernoulli_recon_loss(np.zeros(7), np.full(7, 0.5)) == pytest.approx(7 * math.log(2), rel=1e-15)
    assert bernoulli_recon_loss([50.0, 50.0], [1.0, 1.0]) < 1e-20
    assert bernoulli_recon_loss([800.0], [1.0]) == 0.0
    with pytest.raises(ValueError):
        bernoulli_recon_loss([0.0], [1.5])


def test_bce_against_high_precision():
    rng = np.random.default_rng(0)
    logits, target = rng.normal(scale=5, size=4), rng.uniform(size=4)
    oracle = mpmath.mpf(0)
    for l, t in zip(logits, target):
        s = 1 / (1 + mpmath.exp(-mpmath.mpf(l)))
        oracle -= t * mpmath.log(s) + (1 - t) * mpmath.log(1 - s)
    assert bernoulli_recon_loss(logits, target) == pytest.approx(float(oracle), rel=1e-10)


def _batch(seed=0, n=50, d=6, D=4):
    rng = np.random.default_rng(seed)
    sets = [set(rng.choice(D, size=rng.integers(1, D + 1), replace=False).tolist()) for _ in range(n)]
    return PairBatch(rng.uniform(size=(n, d)), rng.uniform(size=(n, d)), sets)


def _model(seed=1, d=6, D=4, scale=0.3):
    m = ToyVae.init(d, D, seed, scale)
    rng = np.random.default_rng(seed + 100)
    m.enc_w_logvar = scale * rng.standard_normal(m.enc_w_logvar.shape)
    m.enc_b_logvar = scale * rng.standard_normal(m.enc_b_logvar.shape)
    m.input_shift = np.full(d, 0.5)
    m.input_scale = np.full(d, 0.3)
    return m


def test_batch_validation():
    with pytest.raises(ValueError):
        PairBatch(np.zeros((2, 3)), np.zeros((3, 3)), [{0}, {0}])
    with pytest.raises(ValueError):
        PairBatch(np.zeros((1, 3)), np.zeros((1, 3)), [set()])


def test_prior_posterior_gives_pure_reconstruction():
    d, D = 5, 3
    model = ToyVae(np.zeros((D, d)), np.zeros(D), np.zeros((D, d)), np.zeros(D),
                   np.random.default_rng(0).normal(size=(d, D)), np.zeros(d))
    x = np.random.default_rng(1).uniform(size=(10, d))
    batch = PairBatch(x, x, [{0}] * 10)
    loss = pairwise_elbo_loss(model, batch, 7)
    eps = np.random.default_rng(7).standard_normal((1, 10, D))[0]
    recon = 2 * bernoulli_recon_loss(model.decode_logits(eps), x) / 10
    assert loss == pytest.approx(recon, rel=1e-13)


def test_loss_deterministic_and_symmetric():
    model, batch = _model(), _batch()
    assert pairwise_elbo_loss(model, batch, 3) == pairwise_elbo_loss(model, batch, 3)
    assert pairwise_elbo_loss(model, batch, 3) == pairwise_elbo_loss(model, batch.swapped(), 3)
    assert pairwise_elbo_loss(model, batch, 3) != pairwise_elbo_loss(model, batch, 4)


def test_identical_pairs_ignore_shared_sets():
    model = _model()
    x = np.random.default_rng(5).uniform(size=(20, 6))
    all_dims = pairwise_elbo_loss(model, PairBatch(x, x, [range(4)] * 20), 9)
    one_dim = pairwise_elbo_loss(model, PairBatch(x, x, [{2}] * 20), 9)
    assert all_dims == pytest.approx(one_dim, rel=1e-14)


def test_gradient_matches_finite_differences():
    model, batch = _model(d=12, D=5), _batch(d=12, D=5)
    loss, grad = loss_and_gradient(model, batch, 11, n_samples=2)
    theta, g = model.flat(), grad.flat()
    coords = np.random.default_rng(2).choice(theta.size, size=100, replace=False)
    h = 1e-5
    for c in coords:
        up, down = theta.copy(), theta.copy()
        up[c] += h
        down[c] -= h
        fd = (pairwise_elbo_loss(model.with_flat(up), batch, 11, 2)
              - pairwise_elbo_loss(model.with_flat(down), batch, 11, 2)) / (2 * h)
        assert abs(fd - g[c]) <= 1e-4 * max(abs(fd), 1e-3), c


def test_zero_epochs_returns_init():
    problem = gen_toy_disentangled(100, 2, 1, seed=0)
    res = toy_train(problem, 0, seed=4)
    init = ToyVae.init(problem.lhs.shape[1], 3, np.random.SeedSequence(4).spawn(2)[0])
    np.testing.assert_array_equal(res.model.flat(), init.flat())
    assert res.loss_trace == []


def test_training_reduces_loss_and_is_seeded():
    problem = gen_toy_disentangled(300, 2, 1, seed=1)
    a = toy_train(problem, 200, seed=2, lr=0.05)
    b = toy_train(problem, 200, seed=2, lr=0.05)
    assert a.loss_trace == b.loss_trace
    smooth = a.smoothed_trace(20)
    assert smooth[-1] < smooth[0]


def test_divergence_reports_epoch():
    problem = gen_toy_disentangled(200, 2, 1, seed=1)
    with pytest.raises(TrainingDivergedError) as info:
        toy_train(problem, 500, seed=0, lr=50.0)
    assert info.value.epoch < 500


def test_roundtrip_examples():
    grid = latent_grid(3)
    assert grid.shape == (125, 3)
    ident = roundtrip_consistency(lambda x: x, lambda z: z, grid)
    assert ident.max_deviation == 0.0 and ident.passed
    rng = np.random.default_rng(0)
    A, c = rng.normal(size=(3, 3)) + 3 * np.eye(3), rng.normal(size=3)
    dec = lambda z: z @ A.T + c
    enc = lambda x: np.linalg.solve(A, (x - c).T).T
    assert roundtrip_consistency(enc, dec, grid).max_deviation <= 1e-8


def test_trained_roundtrip_is_finite():
    problem = gen_toy_disentangled(200, 2, 1, seed=3)
    model = toy_train(problem, 50, seed=0, lr=0.05).model
    res = roundtrip_consistency(model.encode_mean, model.decode, latent_grid(3, 3), threshold=1.0)
    assert math.isfinite(res.max_deviation) and res.mean_deviation <= res.max_deviation


def test_export_and_trace(tmp_path):
    problem = gen_toy_disentangled(80, 2, 1, seed=3)
    res = toy_train(problem, 5, seed=0, latent_dim=5)
    ds = export_latents(res.model, problem)
    assert ds.latent_mu.shape == (80, 1, 5)
    assert np.all(np.isnan(ds.v_style[:, 1:])) and not np.any(np.isnan(ds.v_style[:, 0]))
    write_loss_trace(res.loss_trace, tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss" and len(rows) == 6
    assert float(rows[3].split(",")[1]) == res.loss_trace[2]
