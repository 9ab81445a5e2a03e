"""Marginal and conditional calibration, dispersion, and the binomial rule
that turns many subgroup tests into one certification decision.

A prediction set is calibrated in the safety-critical sense when every
central prediction interval of probability ``p`` covers the observation at
least a fraction ``p * (1 - eps)`` of the time, and the PIT values are no
more spread out than a uniform variable (variance ``1/12``, with the same
tolerance).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .datamodel import CertDataset
from .outcome import TestOutcome, skipped
from .statdist import Mixture, Normal, NormalArray, PredictiveDistribution, Uniform, binomial_pmf, exact_fraction

__all__ = [
    "CALIBRATION_GRID",
    "CalibrationCurve",
    "ConditionalCalibration",
    "TestOutcome",
    "compute_calibration_curve",
    "test_calibration_curve",
    "pit_values",
    "pit_histogram",
    "test_dispersion",
    "partition_subgroups",
    "test_conditional_calibration",
    "test_probability_n_fails",
    "certify_uncertainty_quantification",
]

# 0.05, 0.10, ..., 1.00; integer multiples keep 1.00 exact
CALIBRATION_GRID = np.arange(1, 21) * 0.05
UNIFORM_VARIANCE = 1.0 / 12.0


@dataclass(frozen=True)
class CalibrationCurve:
    ps: np.ndarray
    observed_frequencies: np.ndarray
    n: int

    def max_deviation(self) -> float:
        """Largest absolute distance from the identity line."""
        return float(np.max(np.abs(self.observed_frequencies - self.ps)))

    def rows(self):
        return list(zip(self.ps.tolist(), self.observed_frequencies.tolist()))


def _validate(preds, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=float).ravel()
    if len(preds) != obs.size:
        raise ValueError(f"length mismatch: {len(preds)} predictions, {obs.size} observations")
    if obs.size == 0:
        raise ValueError("need at least one prediction/observation pair")
    return obs


def _interval_bounds(preds: Sequence[PredictiveDistribution], ps: np.ndarray):
    """Lower and upper central-interval bounds, each of shape ``(len(ps), n)``."""
    q_lo, q_hi = 0.5 - ps / 2, 0.5 + ps / 2
    if isinstance(preds, NormalArray):
        return preds.invcdf(q_lo[:, None]), preds.invcdf(q_hi[:, None])
    n = len(preds)
    lo = np.empty((ps.size, n))
    hi = np.empty((ps.size, n))
    kinds = np.array([type(d).__name__ for d in preds])
    for kind in np.unique(kinds):
        idx = np.flatnonzero(kinds == kind)
        group = [preds[i] for i in idx]
        if kind == "Normal":
            arr = NormalArray.from_normals(group)
            lo[:, idx] = arr.invcdf(q_lo[:, None])
            hi[:, idx] = arr.invcdf(q_hi[:, None])
        elif kind == "Uniform":
            a = np.array([d.a for d in group])
            b = np.array([d.b for d in group])
            lo[:, idx] = a + q_lo[:, None] * (b - a)
            hi[:, idx] = a + q_hi[:, None] * (b - a)
        else:
            for i, d in zip(idx, group):
                lo[:, i] = d.invcdf(q_lo)
                hi[:, i] = d.invcdf(q_hi)
    return lo, hi


def compute_calibration_curve(preds: Sequence[PredictiveDistribution], obs) -> CalibrationCurve:
    """Coverage frequency of the central intervals on the 0.05-step grid."""
    obs = _validate(preds, obs)
    lo, hi = _interval_bounds(preds, CALIBRATION_GRID)
    inside = (lo <= obs) & (obs <= hi)
    freqs = inside.mean(axis=1)
    return CalibrationCurve(CALIBRATION_GRID.copy(), freqs, obs.size)


def test_calibration_curve(preds, obs, eps: float = 0.10) -> TestOutcome:
    """Pass iff ``observed_frequency(p) >= p * (1 - eps)`` on the whole grid."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    curve = compute_calibration_curve(preds, obs)
    required = curve.ps * (1.0 - eps)
    slack = curve.observed_frequencies - required
    worst = int(np.argmin(slack))
    return TestOutcome(
        name="calibration_curve",
        passed=bool(np.all(slack >= 0)),
        statistics={
            "n": float(curve.n),
            "eps": eps,
            "min_slack": float(slack[worst]),
            "worst_p": float(curve.ps[worst]),
            "max_deviation": curve.max_deviation(),
        },
        details={"ps": curve.ps.tolist(), "observed_frequencies": curve.observed_frequencies.tolist()},
    )


def pit_values(preds: Sequence[PredictiveDistribution], obs) -> np.ndarray:
    """Probability integral transform ``cdf(pred_i, obs_i)``."""
    obs = np.asarray(obs, dtype=float).ravel()
    if len(preds) != obs.size:
        raise ValueError(f"length mismatch: {len(preds)} predictions, {obs.size} observations")
    if isinstance(preds, NormalArray):
        return preds.cdf(obs)
    return np.array([float(d.cdf(y)) for d, y in zip(preds, obs)])


def pit_histogram(pit, bins: int = 10):
    """Counts of PIT values in ``bins`` equal-width bins on [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.asarray(pit, dtype=float), bins=edges)
    return edges, counts


def test_dispersion(preds, obs, eps: float = 0.10) -> TestOutcome:
    """Pass iff the PIT variance is at most ``(1/12) * (1 + eps)``."""
    pit = pit_values(preds, obs)
    if pit.size < 2:
        raise ValueError("dispersion test needs at least two observations")
    var = float(np.var(pit, ddof=1))
    bound = UNIFORM_VARIANCE * (1.0 + eps)
    return TestOutcome(
        name="dispersion",
        passed=var <= bound,
        statistics={"n": float(pit.size), "eps": eps, "pit_variance": var, "bound": bound},
    )


def _feature_name(dataset: CertDataset, index: int) -> str:
    return f"content[{index}]" if index < dataset.k else f"style[{index - dataset.k}]"


def _partition(values: np.ndarray, candidates: np.ndarray, n_min: int) -> list[np.ndarray]:
    order = candidates[np.argsort(values[candidates], kind="stable")]
    n_groups = max(len(order) // n_min, 1)
    groups = [order[g * n_min:(g + 1) * n_min] for g in range(n_groups - 1)]
    groups.append(order[(n_groups - 1) * n_min:])
    return groups


def partition_subgroups(dataset: CertDataset, feature_index: int, n_min: int = 10_000) -> list[np.ndarray]:
    """Sort records by one semantic feature and cut consecutive groups of
    ``n_min``; a short remainder joins the last group.

    Records with a missing label for the feature are left out.  If fewer than
    ``n_min`` labelled records exist, a single (undersized) group is returned.
    """
    if n_min < 1:
        raise ValueError("n_min must be >= 1")
    features = dataset.semantic_features()
    if not 0 <= feature_index < features.shape[1]:
        raise IndexError(f"feature index {feature_index} out of range")
    values = features[:, feature_index]
    labelled = np.flatnonzero(~np.isnan(values))
    if labelled.size == 0:
        return []
    return _partition(values, labelled, n_min)


@dataclass
class ConditionalCalibration:
    n_tests: int = 0
    n_fail_calibration: int = 0
    n_fail_dispersion: int = 0
    subgroups: list[dict] = field(default_factory=list)

    @property
    def failing_subgroups(self) -> list[dict]:
        return [g for g in self.subgroups if not (g["calibration_passed"] and g["dispersion_passed"])]


def _subgroup_entry(dataset, idx, output, eps, conditioning) -> dict:
    preds = dataset.y_pred[output]
    sub_preds = preds[idx] if isinstance(preds, NormalArray) else [preds[i] for i in idx]
    obs = dataset.y_obs[idx, output]
    cal = test_calibration_curve(sub_preds, obs, eps)
    disp = test_dispersion(sub_preds, obs, eps) if idx.size >= 2 else None
    return {
        "conditioning": conditioning,
        "output": output,
        "n": int(idx.size),
        "calibration_passed": cal.passed,
        "dispersion_passed": True if disp is None else disp.passed,
        "calibration_min_slack": cal.statistics["min_slack"],
        "pit_variance": None if disp is None else disp.statistics["pit_variance"],
    }


def _describe(dataset, features, feature, idx) -> dict:
    vals = features[idx, feature]
    return {"feature": _feature_name(dataset, feature), "feature_index": feature,
            "lo": float(vals.min()), "hi": float(vals.max())}


def test_conditional_calibration(
    dataset: CertDataset,
    output_index: Optional[int] = None,
    n_min: int = 10_000,
    eps: float = 0.10,
    pairwise: bool = False,
) -> ConditionalCalibration:
    """Run the calibration and dispersion tests on semantic-feature subgroups.

    Every content feature and every style feature with labels is used.  With
    ``pairwise=True`` each ordered feature pair (i, j) is also tested: records
    are cut into blocks of ``2 * n_min`` along i, and each block into groups
    of ``n_min`` along j.
    """
    if dataset.y_pred is None:
        raise ValueError("conditional calibration needs predictions")
    outputs = range(dataset.m) if output_index is None else [output_index]
    features = dataset.semantic_features()
    result = ConditionalCalibration()
    undersized = 0

    def record(idx, conditioning):
        nonlocal undersized
        if idx.size < n_min:
            undersized += 1
        for out in outputs:
            entry = _subgroup_entry(dataset, idx, out, eps, conditioning)
            entry["undersized"] = bool(idx.size < n_min)
            result.n_tests += 1
            result.n_fail_calibration += not entry["calibration_passed"]
            result.n_fail_dispersion += not entry["dispersion_passed"]
            result.subgroups.append(entry)

    for f in range(features.shape[1]):
        for idx in partition_subgroups(dataset, f, n_min):
            record(idx, [_describe(dataset, features, f, idx)])

    if pairwise:
        for fi, fj in itertools.permutations(range(features.shape[1]), 2):
            labelled = np.flatnonzero(~np.isnan(features[:, fi]) & ~np.isnan(features[:, fj]))
            if labelled.size == 0:
                continue
            for block in _partition(features[:, fi], labelled, 2 * n_min):
                for idx in _partition(features[:, fj], block, n_min):
                    record(idx, [_describe(dataset, features, fi, idx), _describe(dataset, features, fj, idx)])
    return result


def test_probability_n_fails(n_tests: int, n_fail: int, p_fail: float = 0.01, thresh: float = 0.001) -> TestOutcome:
    """Accept ``n_fail`` failures out of ``n_tests`` unless that many is
    improbable (binomial pmf below ``thresh``) for a per-test false-failure
    rate ``p_fail``."""
    if n_tests < 0 or n_fail < 0:
        raise ValueError("counts must be non-negative")
    if n_fail > n_tests:
        raise ValueError(f"n_fail={n_fail} exceeds n_tests={n_tests}")
    # decimal p_fail read exactly so that e.g. 3 <= 300 * 0.01 is not a rounding accident
    within_rate = Fraction(n_fail) <= n_tests * exact_fraction(p_fail)
    pmf = binomial_pmf(n_tests, p_fail, n_fail)
    return TestOutcome(
        name="probability_n_fails",
        passed=bool(within_rate or pmf >= thresh),
        statistics={
            "n_tests": float(n_tests),
            "n_fail": float(n_fail),
            "p_fail": p_fail,
            "thresh": thresh,
            "binomial_pmf": pmf,
        },
    )


def certify_uncertainty_quantification(
    dataset: CertDataset,
    eps: float = 0.10,
    n_min: int = 10_000,
    p_fail: float = 0.01,
    thresh: float = 0.001,
    pairwise: bool = False,
    histogram_bins: int = 10,
) -> dict:
    """Marginal tests per output plus the binomial rule on subgroup counts.

    Returns a JSON-ready report section.
    """
    if dataset.y_pred is None:
        return {"status": "skipped: no predictions", "certified": None}
    marginal = []
    for out in range(dataset.m):
        preds, obs = dataset.y_pred[out], dataset.y_obs[:, out]
        cal = test_calibration_curve(preds, obs, eps)
        disp = test_dispersion(preds, obs, eps)
        edges, counts = pit_histogram(pit_values(preds, obs), histogram_bins)
        marginal.append({
            "output": out,
            "calibration": cal.to_dict(),
            "dispersion": disp.to_dict(),
            "curve": {"p": cal.details["ps"], "observed_frequency": cal.details["observed_frequencies"]},
            "pit_histogram": {"bin_lo": edges[:-1].tolist(), "bin_hi": edges[1:].tolist(),
                              "count": counts.tolist()},
        })
    cond = test_conditional_calibration(dataset, None, n_min, eps, pairwise)
    bin_cal = test_probability_n_fails(cond.n_tests, cond.n_fail_calibration, p_fail, thresh)
    bin_disp = test_probability_n_fails(cond.n_tests, cond.n_fail_dispersion, p_fail, thresh)
    marginal_ok = all(m["calibration"]["passed"] and m["dispersion"]["passed"] for m in marginal)
    certified = bool(marginal_ok and bin_cal.passed and bin_disp.passed)
    return {
        "status": "certified" if certified else "not certified",
        "certified": certified,
        "parameters": {"eps": eps, "n_min": n_min, "p_fail": p_fail, "thresh": thresh, "pairwise": pairwise},
        "marginal": marginal,
        "conditional": {
            "n_tests": cond.n_tests,
            "n_fail_calibration": cond.n_fail_calibration,
            "n_fail_dispersion": cond.n_fail_dispersion,
            "binomial_calibration": bin_cal.to_dict(),
            "binomial_dispersion": bin_disp.to_dict(),
            "subgroups": cond.subgroups,
        },
        "failing_subgroups": cond.failing_subgroups,
    }


for _fn in (test_calibration_curve, test_dispersion, test_conditional_calibration, test_probability_n_fails):
    _fn.__test__ = False  # library functions, not pytest tests
