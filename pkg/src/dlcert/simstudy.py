"""Seeded synthetic scenarios and the false-failure Monte Carlo study.

All randomness flows from :func:`make_rng`, a Philox (counter-based)
generator, so every scenario is bit-identical for a given seed on any
platform.  Distributions written ``N(0, 2)`` in the scenario descriptions
are parameterised by *variance*; the generators convert to standard
deviations explicitly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .calibration import test_calibration_curve
from .datamodel import CertDataset, OperatingRange
from .statdist import NormalArray

__all__ = [
    "make_rng",
    "spawn_seeds",
    "gen_perfect_calibration",
    "gen_conditional_failure",
    "gen_time_varying_forecast",
    "ToyProblem",
    "gen_toy_disentangled",
    "gen_toy_latents",
    "run_failure_trial",
    "FailureTable",
    "compute_failure_table",
    "recommend_sample_size",
    "CONDITIONAL_FAILURE_WEIGHTS",
]

CONDITIONAL_FAILURE_WEIGHTS = np.array([1, 4, 6, 4, 1]) / 16.0


def make_rng(seed) -> np.random.Generator:
    """Philox generator from an int or a :class:`numpy.random.SeedSequence`."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def spawn_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)


def _ids(n: int) -> tuple[str, ...]:
    return tuple(f"r{i}" for i in range(n))


def gen_perfect_calibration(n: int, seed) -> CertDataset:
    """Observations N(0, 1), every prediction N(0, 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    obs = rng.standard_normal(n)
    return CertDataset(
        ids=_ids(n),
        v_content=np.zeros((n, 0)),
        v_style=np.zeros((n, 0)),
        y_obs=obs[:, None],
        y_pred=(NormalArray(np.zeros(n), np.ones(n)),),
        metadata={"scenario": "perfect_calibration", "seed": str(seed)},
    )


def gen_conditional_failure(n: int, seed) -> CertDataset:
    """x in {1..5} with weights (1,4,6,4,1)/16, observations N(x - 3, 1),
    constant prediction with mean 0 and variance 2.

    The binomial weights make the observation mixture's variance exactly 2,
    so the constant prediction is marginally matched but wrong for x = 1, 5.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    x = rng.choice(np.arange(1, 6), size=n, p=CONDITIONAL_FAILURE_WEIGHTS)
    obs = rng.normal(x - 3.0, 1.0)
    return CertDataset(
        ids=_ids(n),
        v_content=x[:, None].astype(float),
        v_style=np.zeros((n, 0)),
        y_obs=obs[:, None],
        y_pred=(NormalArray(np.zeros(n), np.full(n, math.sqrt(2.0))),),
        metadata={"scenario": "conditional_failure", "seed": str(seed)},
    )


def gen_time_varying_forecast(T: int, seed) -> CertDataset:
    """mu_t ~ N(0, variance 2), obs_t ~ N(mu_t, 1), forecast N(0, variance 3)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = make_rng(seed)
    mu_t = rng.normal(0.0, math.sqrt(2.0), size=T)
    obs = rng.normal(mu_t, 1.0)
    return CertDataset(
        ids=_ids(T),
        v_content=np.arange(T, dtype=float)[:, None],
        v_style=np.zeros((T, 0)),
        y_obs=obs[:, None],
        y_pred=(NormalArray(np.zeros(T), np.full(T, math.sqrt(3.0))),),
        metadata={"scenario": "time_varying_forecast", "seed": str(seed)},
    )


@dataclass(frozen=True)
class ToyProblem:
    """Paired observations for weakly-supervised disentanglement.

    ``lhs``/``rhs`` are inputs in [0, 1] of shape ``(n_pairs, d)``.
    ``shared`` holds, per pair, the content index both sides agree on.
    ``factors_lhs``/``factors_rhs`` are the ground-truth ``(content, style)``
    values, and ``mixing`` is the matrix applied to standardised factors.
    """

    lhs: np.ndarray
    rhs: np.ndarray
    shared: np.ndarray
    factors_lhs: np.ndarray
    factors_rhs: np.ndarray
    mixing: np.ndarray
    k: int
    l: int
    operating_range: OperatingRange
    noise: float
    gain: float = 0.1

    @property
    def shared_index_sets(self) -> list[frozenset[int]]:
        return [frozenset({int(i)}) for i in self.shared]

    def standardise(self, factors: np.ndarray) -> np.ndarray:
        lo = np.array(self.operating_range.lower)
        hi = np.array(self.operating_range.upper)
        out = np.array(factors, dtype=float, copy=True)
        # uniform content -> zero mean, unit variance
        out[:, : self.k] = (out[:, : self.k] - (lo + hi) / 2) / (hi - lo) * math.sqrt(12.0)
        return out

    def observe(self, factors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Inputs for arbitrary factor values (fresh observation noise)."""
        z = self.standardise(factors)
        x = 0.5 + self.gain * z @ self.mixing.T + self.noise * rng.standard_normal((len(z), self.mixing.shape[0]))
        return np.clip(x, 0.0, 1.0)

    def sample_factors(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo = np.array(self.operating_range.lower)
        hi = np.array(self.operating_range.upper)
        content = rng.uniform(lo, hi, size=(n, self.k))
        style = rng.standard_normal((n, self.l))
        return np.hstack([content, style])


def gen_toy_disentangled(
    n_pairs: int,
    k: int,
    l: int,
    seed,
    d: int = 16,
    noise: float = 0.02,
    operating_range: Optional[OperatingRange] = None,
    gain: float = 0.1,
) -> ToyProblem:
    """Linear toy world: content ~ Uniform[a_i, b_i], style ~ N(0, 1),
    inputs ``x = clip(0.5 + gain * A v_std + noise)`` for a fixed random
    full-rank ``A`` of shape ``(d, k + l)``.  Each pair shares exactly one
    content factor; everything else is redrawn.

    Under a Bernoulli decoder the per-factor signal energy is roughly
    ``gain**2 * d / (k + l)`` against a noise variance of about 0.25; below
    that level a variational encoder ignores the factor.
    """
    if k < 1:
        raise ValueError("need at least one content factor")
    if d < k + l:
        raise ValueError("input dimension must be at least k + l")
    rng = make_rng(seed)
    if operating_range is None:
        operating_range = OperatingRange([-1.0] * k, [1.0] * k)
    if len(operating_range) != k:
        raise ValueError("operating range length must equal k")
    mixing = rng.standard_normal((d, k + l)) / math.sqrt(k + l)
    problem = ToyProblem(
        lhs=np.empty((0, d)), rhs=np.empty((0, d)), shared=np.empty(0, dtype=int),
        factors_lhs=np.empty((0, k + l)), factors_rhs=np.empty((0, k + l)),
        mixing=mixing, k=k, l=l, operating_range=operating_range, noise=noise, gain=gain,
    )
    f_lhs = problem.sample_factors(n_pairs, rng)
    f_rhs = problem.sample_factors(n_pairs, rng)
    shared = rng.integers(0, k, size=n_pairs)
    f_rhs[np.arange(n_pairs), shared] = f_lhs[np.arange(n_pairs), shared]
    return ToyProblem(
        lhs=problem.observe(f_lhs, rng),
        rhs=problem.observe(f_rhs, rng),
        shared=shared,
        factors_lhs=f_lhs,
        factors_rhs=f_rhs,
        mixing=mixing,
        k=k,
        l=l,
        operating_range=operating_range,
        noise=noise,
        gain=gain,
    )


def gen_toy_latents(n: int, seed, k: int = 2, l: int = 1, noise: float = 0.01,
                    entangled: bool = False) -> CertDataset:
    """Latents built directly from the factors of a toy problem.

    Content latents are a random permutation of the standardised content
    factors plus ``N(0, noise^2)``; style latents copy the style factors the
    same way.  With ``entangled=True`` the first content latent carries the
    sum of the first two content factors and the second one carries noise
    only.  The permutation is stored in ``metadata["permutation"]``:
    factor ``i`` sits in latent ``permutation[i]``.
    """
    if entangled and k < 2:
        raise ValueError("the entangled variant needs k >= 2")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    problem_seq, latent_seq = seq.spawn(2)
    problem = gen_toy_disentangled(n, k, l, problem_seq)
    rng = make_rng(latent_seq)
    factors = problem.standardise(problem.factors_lhs)
    perm = rng.permutation(k)
    mu = np.empty((n, k + l))
    mu[:, perm] = factors[:, :k]
    if entangled:
        mu[:, perm[0]] = factors[:, 0] + factors[:, 1]
        mu[:, perm[1]] = 0.0
    mu[:, k:] = factors[:, k:]
    mu += noise * rng.standard_normal(mu.shape)
    return CertDataset(
        ids=_ids(n),
        v_content=problem.factors_lhs[:, :k],
        v_style=problem.factors_lhs[:, k:],
        y_obs=problem.factors_lhs[:, :k],
        latent_mu=mu[:, None, :],
        latent_sigma=np.full((n, 1, k + l), max(noise, 1e-3)),
        metadata={"scenario": "toy-latents", "permutation": perm.tolist(), "entangled": entangled},
    )


# --------------------------------------------------------------------------
# false-failure study
# --------------------------------------------------------------------------

def run_failure_trial(n_samples: int, eps: float, seed) -> bool:
    """True if the calibration-curve test rejects a perfectly calibrated
    sample of size ``n_samples``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    obs = make_rng(seed).standard_normal(n_samples)
    preds = NormalArray(np.zeros(n_samples), np.ones(n_samples))
    return not test_calibration_curve(preds, obs, eps).passed


@dataclass(frozen=True)
class FailureTable:
    n_grid: tuple[int, ...]
    eps_grid: tuple[float, ...]
    n_trials: int
    frequencies: np.ndarray  # shape (len(eps_grid), len(n_grid))

    def value(self, eps: float, n: int) -> float:
        i = int(np.argmin(np.abs(np.array(self.eps_grid) - eps)))
        return float(self.frequencies[i, self.n_grid.index(n)])

    def to_csv(self, path) -> None:
        """Rows are eps values, columns sample sizes."""
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["eps"] + [str(n) for n in self.n_grid])
            for eps, row in zip(self.eps_grid, self.frequencies):
                writer.writerow([repr(float(eps))] + [repr(float(v)) for v in row])

    def to_dict(self) -> dict:
        return {
            "n_grid": list(self.n_grid),
            "eps_grid": list(self.eps_grid),
            "n_trials": self.n_trials,
            "frequencies": self.frequencies.tolist(),
        }


def compute_failure_table(
    n_grid: Sequence[int] = (10, 100, 1_000, 10_000, 100_000),
    eps_grid: Sequence[float] = (0.05, 0.10, 0.20),
    n_trials: int = 100,
    seed=0,
) -> FailureTable:
    """Empirical false-failure frequency per (eps, n) cell.

    Each cell gets its own child seed, and each trial a grandchild, so cells
    can be recomputed independently.
    """
    if not n_grid or not eps_grid:
        raise ValueError("grids must be non-empty")
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    cells = spawn_seeds(seed, len(eps_grid) * len(n_grid))
    freqs = np.empty((len(eps_grid), len(n_grid)))
    for i, eps in enumerate(eps_grid):
        for j, n in enumerate(n_grid):
            trial_seeds = cells[i * len(n_grid) + j].spawn(n_trials)
            freqs[i, j] = np.mean([run_failure_trial(n, eps, s) for s in trial_seeds])
    return FailureTable(tuple(int(n) for n in n_grid), tuple(float(e) for e in eps_grid), n_trials, freqs)


def recommend_sample_size(table: FailureTable, eps: float, max_failure: float = 0.01) -> Optional[int]:
    """Smallest n in the table whose failure frequency is at most ``max_failure``."""
    i = int(np.argmin(np.abs(np.array(table.eps_grid) - eps)))
    for n, freq in zip(table.n_grid, table.frequencies[i]):
        if freq <= max_failure:
            return n
    return None
