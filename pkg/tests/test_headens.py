import json
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dlcert.datamodel import CertDataset, LatentGaussian, OperatingRange
from dlcert.headens import (
    HeadConfig,
    calibrate_orientation,
    ensemble_median_select,
    head_transform,
    head_transform_arrays,
    ood_detect,
    outside_mass,
    run_head_batch,
)
from dlcert.statdist import Normal

from conftest import mp_normal_cdf, mp_normal_pdf


def _mixture_outside_oracle(outputs, selected):
    ref = outputs[selected]
    lo, hi = ref.mu - 2 * ref.sigma, ref.mu + 2 * ref.sigma
    total = mpmath.mpf(0)
    for o in outputs:
        total += mp_normal_cdf(lo, o.mu, o.sigma) + (1 - mpmath.mpf(mp_normal_cdf(hi, o.mu, o.sigma)))
    return float(total / len(outputs))


def test_head_examples():
    out = head_transform(LatentGaussian(0.0, 1.0), -10, 10)
    assert out.mu == pytest.approx(0.0, abs=1e-15)
    assert out.sigma == pytest.approx(20 * mp_normal_pdf(0.0), rel=1e-12)
    assert out.sigma == pytest.approx(7.9788, abs=1e-4)
    q = 0.6745
    out = head_transform(LatentGaussian(q, 0.1), 0, 1)
    assert out.mu == pytest.approx(mp_normal_cdf(q), rel=1e-12)
    assert out.mu == pytest.approx(0.75, abs=1e-4)
    assert out.sigma == pytest.approx(0.1 * mp_normal_pdf(q), rel=1e-12)
    assert out.sigma == pytest.approx(0.0318, abs=1e-4)
    assert head_transform(LatentGaussian(0.0, 1.0), -15, 15, flip=True).mu == pytest.approx(0.0, abs=1e-14)


def test_head_validation():
    with pytest.raises(ValueError):
        head_transform(LatentGaussian(0.0, 1.0), 1, 1)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 3), st.floats(-10, 0), st.floats(0.1, 10))
def test_flip_mirrors_output(mu, sigma, a, width):
    b = a + width
    plain = head_transform(LatentGaussian(mu, sigma), a, b)
    flipped = head_transform(LatentGaussian(mu, sigma), a, b, flip=True)
    assert plain.mu + flipped.mu == pytest.approx(a + b, rel=1e-9, abs=1e-9)
    assert plain.sigma == pytest.approx(flipped.sigma, rel=1e-12)
    assert a <= plain.mu <= b


def test_sigma_matches_finite_difference_jacobian():
    rng = np.random.default_rng(0)
    mus = rng.normal(size=100)
    h = 1e-6
    fd = (head_transform_arrays(mus + h, 1.0, -3, 5)[0] - head_transform_arrays(mus - h, 1.0, -3, 5)[0]) / (2 * h)
    sig = head_transform_arrays(mus, 1.0, -3, 5)[1]
    np.testing.assert_allclose(sig, fd, rtol=1e-6)


def test_outputs_uniform_under_prior():
    mus = np.random.default_rng(1).standard_normal(100_000)
    y, _ = head_transform_arrays(mus, 0.1, 2.0, 6.0)
    assert stats.kstest(y, stats.uniform(loc=2.0, scale=4.0).cdf).statistic < 0.02


def test_extreme_latents_stay_valid():
    out = head_transform(LatentGaussian(60.0, 1.0), 0, 1)
    assert out.mu == 1.0 and out.sigma > 0


def test_orientation_examples():
    assert calibrate_orientation([[(-1.0, 1.0)]]) == (False,)
    assert calibrate_orientation([[(1.0, -1.0)]]) == (True,)
    assert calibrate_orientation([[(0, 1), (0, 1), (1, 0)]]) == (False,)
    with pytest.raises(ValueError, match="dimension 1"):
        calibrate_orientation([[(0, 1)], []])


def test_median_examples():
    assert ensemble_median_select([1, 2, 3, 4, 5]) == 2
    assert ensemble_median_select([1, 2, 3, 4]) == 1
    assert ensemble_median_select([0.3]) == 0
    assert ensemble_median_select([5, 4, 3, 2, 1]) == 2
    with pytest.raises(ValueError):
        ensemble_median_select([])


def test_config_requires_flip_length():
    with pytest.raises(ValueError):
        HeadConfig(OperatingRange([0], [1]), [False, True])
    with pytest.warns(UserWarning):
        HeadConfig(OperatingRange([0], [1]))


def _config(k=1):
    return HeadConfig(OperatingRange([-1.0] * k, [1.0] * k), [False] * k)


def test_identical_members_not_ood():
    members = [[LatentGaussian(0.2, 0.1)] for _ in range(5)]
    res = ood_detect(members, _config())
    oracle = float(2 * mpmath.ncdf(-2))
    assert res.outside_mass[0] == pytest.approx(oracle, abs=1e-9)
    assert res.outside_mass[0] == pytest.approx(0.0455, abs=1e-4)
    assert not res.ood


def test_shifted_member_is_ood():
    outputs = [Normal(0.0, 1.0)] * 4 + [Normal(6.0, 1.0)]
    mass = outside_mass(outputs, ensemble_median_select([o.mu for o in outputs]))
    assert mass == pytest.approx(_mixture_outside_oracle(outputs, 0), abs=1e-12)
    assert mass == pytest.approx(0.2364, abs=1e-3)
    members = [[LatentGaussian(0.0, 0.05)] for _ in range(4)] + [[LatentGaussian(0.3, 0.05)]]
    res = ood_detect(members, _config(), 0.15)
    assert res.ood and res.flags == (True,)


def test_two_clusters():
    outputs = [Normal(0.0, 1.0)] * 2 + [Normal(4.0, 1.0)] * 2
    sel = ensemble_median_select([o.mu for o in outputs])
    assert sel == 1
    mass = outside_mass(outputs, sel)
    assert mass == pytest.approx(_mixture_outside_oracle(outputs, sel), abs=1e-12)
    assert mass == pytest.approx(0.5, abs=0.02)
    assert mass > 0.15


def test_median_ties_break_on_sigma():
    assert ensemble_median_select([0, 0, 0], [1.0, 0.5, 2.0]) == 0
    assert ensemble_median_select([0, 0, 0], [0.5, 1.0, 2.0]) == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.floats(0.05, 1))
def test_outside_mass_floor(mus, sigma):
    res = ood_detect([[LatentGaussian(m, sigma)] for m in mus], _config())
    # the selected member contributes its own two-sided tail with weight 1/E
    assert res.outside_mass[0] >= 2 * stats.norm.sf(2) / len(mus) - 1e-12


def test_outside_mass_can_fall_below_single_member_tail():
    res = ood_detect([[LatentGaussian(0.0, 1.0)], [LatentGaussian(1.0, 1.0)]], _config())
    assert res.outside_mass[0] < 2 * stats.norm.sf(2)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-3, 5), st.floats(0.01, 1))
def test_monotone_and_vanishing_sigma(mu, step, sigma):
    lo = head_transform(LatentGaussian(mu, sigma), 0, 1)
    hi = head_transform(LatentGaussian(mu + step, sigma), 0, 1)
    assert hi.mu >= lo.mu
    assert head_transform(LatentGaussian(mu + step, sigma), 0, 1, True).mu <= head_transform(
        LatentGaussian(mu, sigma), 0, 1, True).mu
    assert head_transform(LatentGaussian(40.0, sigma), 0, 1).sigma < 1e-300


def test_overall_flag_is_or_over_dims():
    calm = [LatentGaussian(0.0, 0.05)]
    members = [calm + [LatentGaussian(0.0, 0.05)] for _ in range(4)] + [calm + [LatentGaussian(0.5, 0.05)]]
    res = ood_detect(members, _config(2))
    assert res.flags == (False, True) and res.ood


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(0.05, 1)), min_size=2, max_size=7), st.randoms())
def test_ood_permutation_invariant(latents, rnd):
    members = [[LatentGaussian(m, s)] for m, s in latents]
    shuffled = list(members)
    rnd.shuffle(shuffled)
    a = ood_detect(members, _config())
    b = ood_detect(shuffled, _config())
    assert a.outside_mass[0] == pytest.approx(b.outside_mass[0], abs=1e-12)
    assert a.outputs[0].mu == pytest.approx(b.outputs[0].mu, abs=1e-15)


def test_ood_needs_two_members():
    with pytest.raises(ValueError):
        ood_detect([[LatentGaussian(0, 1)]], _config())


def test_run_head_batch(tmp_path):
    n, E = 4, 3
    mu = np.zeros((n, E, 1))
    mu[3, 2, 0] = 3.0
    ds = CertDataset(ids=["a", "b", "c", "d"], v_content=np.zeros((n, 1)), v_style=np.empty((n, 0)),
                     y_obs=np.zeros((n, 1)), latent_mu=mu, latent_sigma=np.full((n, E, 1), 0.1))
    out = run_head_batch(ds, _config(), tmp_path / "h.jsonl")
    lines = [json.loads(s) for s in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert [r["id"] for r in lines] == ["a", "b", "c", "d"]
    assert [r["ood"] for r in lines] == [False, False, False, True]
    assert out.has_predictions
    np.testing.assert_allclose(out.prediction_means(0), [r["y"][0] for r in lines])
