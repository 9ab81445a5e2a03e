"""Generalisation checks that retrain a model through an adapter.

* New feature combinations: hold out every record close to a random record
  in two semantic features at once, retrain, and compare the error on the
  held-out corner with an ordinary random split.
* Feature collapse: retrain without the extreme 10% at either end of one
  content feature and check that those extremes are still mapped outside the
  range seen in training.
* Ensemble disagreement: per-record variance across ensemble members,
  counted against expected false-positive and false-negative rates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .adapters import AdapterError, ModelAdapter
from .datamodel import CertDataset
from .outcome import TestOutcome

__all__ = [
    "HoldoutDescriptor",
    "HoldoutError",
    "samples_without_holdout_feature",
    "prediction_mse",
    "test_new_feature_combinations",
    "test_no_feature_collapse",
    "ensemble_disagreement_report",
]


class HoldoutError(RuntimeError):
    pass


@dataclass(frozen=True)
class HoldoutDescriptor:
    record: int
    features: tuple[int, int]
    center: tuple[float, float]
    delta: float
    test_indices: np.ndarray

    def to_dict(self) -> dict:
        return {
            "record": self.record,
            "features": list(self.features),
            "center": list(self.center),
            "delta": self.delta,
            "n_test": int(self.test_indices.size),
        }


def samples_without_holdout_feature(vs, delta: float, rng_seed, max_retries: int = 100):
    """Training indices that avoid one random feature combination.

    A record ``v*`` and two distinct features ``i, j`` are drawn at random;
    every record with ``|v_i - v*_i| <= delta`` and ``|v_j - v*_j| <= delta``
    is held out.  Missing values (NaN) never match.  Draws that leave either
    side empty are repeated up to ``max_retries`` times.

    Returns ``(train_indices, descriptor)``.
    """
    vs = np.asarray(vs, dtype=float)
    if vs.ndim != 2 or vs.shape[1] < 2:
        raise ValueError("need a matrix with at least two features")
    if not delta > 0:
        raise ValueError("delta must be positive")
    n = vs.shape[0]
    if n < 2:
        raise ValueError("need at least two records")
    rng = np.random.default_rng(rng_seed)
    for _ in range(max_retries):
        r = int(rng.integers(n))
        usable = np.flatnonzero(~np.isnan(vs[r]))
        if usable.size < 2:
            continue
        i, j = (int(f) for f in rng.choice(usable, size=2, replace=False))
        with np.errstate(invalid="ignore"):
            near = (np.abs(vs[:, i] - vs[r, i]) <= delta) & (np.abs(vs[:, j] - vs[r, j]) <= delta)
        test = np.flatnonzero(near)
        train = np.flatnonzero(~near)
        if test.size and train.size:
            return train, HoldoutDescriptor(r, (i, j), (float(vs[r, i]), float(vs[r, j])), float(delta), test)
    raise HoldoutError(f"no usable holdout split after {max_retries} draws (delta {delta} too large?)")


def prediction_mse(dataset: CertDataset) -> float:
    """Mean squared error of predictive means, averaged over outputs."""
    if not dataset.has_predictions:
        raise ValueError("dataset has no predictions")
    errs = [np.mean((dataset.prediction_means(j) - dataset.y_obs[:, j]) ** 2) for j in range(dataset.m)]
    return float(np.mean(errs))


def _train_eval(adapter: ModelAdapter, train: CertDataset, eval: CertDataset, where: str) -> CertDataset:
    try:
        return adapter.train_eval(train, eval)
    except AdapterError as exc:
        raise AdapterError(f"{where}: {exc}", exc.stderr) from exc
    except Exception as exc:
        raise AdapterError(f"{where}: {type(exc).__name__}: {exc}") from exc


def _ratio(mse_baseline: float, mse_holdout: float, mse_floor: float) -> float:
    # performance is -MSE, so relative performance is baseline / holdout error;
    # errors below the floor count as equal (round-off on exact fits)
    return max(mse_baseline, mse_floor) / max(mse_holdout, mse_floor)


def test_new_feature_combinations(dataset: CertDataset, adapter: ModelAdapter, delta: float = 0.2,
                                  n_repeat: int = 20, margin: float = 0.1, train_fraction: float = 0.80,
                                  seed=0, mse_floor: float = 1e-12) -> TestOutcome:
    """Compare held-out-combination error against a random-split baseline.

    Passes iff ``MSE_baseline / MSE_holdout > 1 - margin`` for every repeat,
    with both errors raised to at least ``mse_floor``.  Held-out corners are
    small, so with noisy targets the ratio fluctuates even for a model that
    generalises perfectly.
    """
    if not mse_floor > 0:
        raise ValueError("mse_floor must be positive")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if n_repeat < 0:
        raise ValueError("n_repeat must be >= 0")
    vs = dataset.semantic_features()
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    base_seq, *repeat_seqs = seq.spawn(n_repeat + 1)

    perm = np.random.default_rng(base_seq).permutation(dataset.n)
    n_train = int(round(train_fraction * dataset.n))
    if not 0 < n_train < dataset.n:
        raise ValueError("baseline split leaves an empty side")
    base = _train_eval(adapter, dataset.subset(np.sort(perm[:n_train])),
                       dataset.subset(np.sort(perm[n_train:])), "baseline")
    mse_base = prediction_mse(base)

    repeats = []
    for r, rseq in enumerate(repeat_seqs):
        train_idx, holdout = samples_without_holdout_feature(vs, delta, rseq)
        pred = _train_eval(adapter, dataset.subset(train_idx), dataset.subset(holdout.test_indices), f"repeat {r}")
        mse = prediction_mse(pred)
        repeats.append({**holdout.to_dict(), "repeat": r, "mse": mse, "ratio": _ratio(mse_base, mse, mse_floor)})

    ratios = [rep["ratio"] for rep in repeats]
    passed = all(q > 1 - margin for q in ratios)
    details = {"repeats": repeats, "baseline_mse": mse_base}
    if n_repeat == 0:
        details["note"] = "no repeats executed"
    return TestOutcome(
        name="new_feature_combinations",
        passed=passed,
        statistics={
            "baseline_mse": mse_base,
            "min_ratio": min(ratios) if ratios else float("nan"),
            "margin": margin,
            "delta": delta,
            "n_repeat": float(n_repeat),
        },
        details=details,
    )


def test_no_feature_collapse(dataset: CertDataset, adapter: ModelAdapter, content_index: int = 0,
                             output_index: Optional[int] = None, trim: float = 0.10,
                             quantiles: tuple[float, float] = (0.01, 0.99),
                             max_inside: float = 0.02) -> TestOutcome:
    """Retrain without the extremes of one content feature and check that
    the extremes are embedded outside the training range.

    The embedding of a record is the adapter's predictive mean for output
    ``output_index`` (default: ``content_index``).  The interval is the
    ``quantiles`` range of the training embeddings; the test passes iff
    fewer than ``max_inside`` of the held-out extremes fall inside it.
    """
    if not 0 <= content_index < dataset.k:
        raise ValueError(f"content_index must lie in 0..{dataset.k - 1}")
    out = content_index if output_index is None else output_index
    if not 0 <= out < dataset.m:
        raise ValueError(f"output_index must lie in 0..{dataset.m - 1}")
    n = dataset.n
    n_cut = int(np.floor(trim * n))
    if n_cut < 1 or n - 2 * n_cut < 2:
        raise ValueError("dataset too small for trimming")
    order = np.argsort(dataset.v_content[:, content_index], kind="stable")
    train_idx = np.sort(order[n_cut:n - n_cut])
    eval_idx = np.sort(np.concatenate([order[:n_cut], order[n - n_cut:]]))
    everything = np.concatenate([train_idx, eval_idx])
    pred = _train_eval(adapter, dataset.subset(train_idx), dataset.subset(everything), "feature collapse")
    emb = pred.prediction_means(out)
    emb_train, emb_eval = emb[:train_idx.size], emb[train_idx.size:]
    lo, hi = np.quantile(emb_train, quantiles)
    inside = float(np.mean((emb_eval >= lo) & (emb_eval <= hi)))
    return TestOutcome(
        name="no_feature_collapse",
        passed=inside < max_inside,
        statistics={"fraction_inside": inside, "interval_lo": float(lo), "interval_hi": float(hi),
                    "max_inside": max_inside},
        details={"content_index": content_index, "output_index": out,
                 "n_train": int(train_idx.size), "n_eval": int(eval_idx.size)},
    )


def _member_means(source) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(source, CertDataset):
        if source.latent_mu is None:
            raise ValueError("dataset carries no ensemble latents")
        return np.asarray(source.latent_mu), source.ids
    arr = np.asarray(source, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("member means must have shape (n, E) or (n, E, m)")
    return arr, tuple(str(i) for i in range(arr.shape[0]))


def _indices(subset, n: int) -> np.ndarray:
    idx = np.asarray(subset, dtype=int).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError("subset index out of range")
    return np.unique(idx)


def ensemble_disagreement_report(source: Union[CertDataset, np.ndarray], tau: float,
                                 expected_fp_rate: float, expected_fn_rate: float,
                                 ood_subset: Optional[Sequence[int]] = None,
                                 easy_subset: Optional[Sequence[int]] = None,
                                 ids: Optional[Sequence[str]] = None) -> dict:
    """Count records whose member means disagree by more than ``tau``.

    ``source`` is a dataset with ``E``-member latents or an array of member
    means of shape ``(n, E)`` or ``(n, E, m)``.  A record is rejected when
    the across-member variance of any output exceeds ``tau``.  Indices in
    ``ood_subset`` are known to be out of distribution; all other records
    count as in distribution.  ``tau`` is taken as given and never tuned.
    """
    means, default_ids = _member_means(source)
    n, E, _ = means.shape
    if E < 2:
        raise ValueError("need at least two ensemble members")
    ids = tuple(default_ids if ids is None else (str(i) for i in ids))
    if len(ids) != n:
        raise ValueError("one id per record is required")
    variance = means.var(axis=1)
    rejected = np.any(variance > tau, axis=1)

    ood = _indices(ood_subset if ood_subset is not None else [], n)
    in_dist = np.setdiff1d(np.arange(n), ood)
    report = {
        "tau": tau,
        "n_records": n,
        "n_members": E,
        "max_variance": variance.max(axis=1).tolist(),
        "in_distribution": _rate_block(rejected[in_dist], expected_fp_rate, "rejected", "expected_fp_rate"),
        "high_variance_in_distribution": [ids[i] for i in in_dist[rejected[in_dist]]],
    }
    if easy_subset is not None:
        easy = _indices(easy_subset, n)
        report["easy"] = {"n": int(easy.size), "rejected": int(rejected[easy].sum())}
    if ood.size:
        block = _rate_block(rejected[ood], None, "detected", None)
        block["missed"] = block["n"] - block["detected"]
        block["miss_rate"] = block["missed"] / block["n"]
        block["expected_fn_rate"] = expected_fn_rate
        block["within_expected"] = block["miss_rate"] <= expected_fn_rate
        report["ood"] = block
    return report


def _rate_block(flags: np.ndarray, expected: Optional[float], count_key: str, expected_key: Optional[str]) -> dict:
    count = int(flags.sum())
    rate = count / flags.size if flags.size else 0.0
    block = {"n": int(flags.size), count_key: count, f"{count_key}_rate": rate}
    if expected_key is not None:
        block[expected_key] = expected
        block["within_expected"] = rate <= expected
    return block


for _fn in (test_new_feature_combinations, test_no_feature_collapse):
    _fn.__test__ = False
