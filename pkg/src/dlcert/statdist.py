"""Univariate predictive distributions and the scalar probability helpers
used throughout the harness.

Every model output is one of :class:`Normal`, :class:`Uniform` or an
equal-weight :class:`Mixture` of normals.  All three expose ``cdf``, ``pdf``
and ``invcdf`` that broadcast over numpy arrays.  :class:`NormalArray` is a
vector of normals stored column-wise so that calibration code can work on
10^5 predictions without materialising 10^5 objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Union

import numpy as np
from scipy import optimize, special, stats

__all__ = [
    "Normal",
    "Uniform",
    "Mixture",
    "NormalArray",
    "PredictiveDistribution",
    "Interval",
    "normal_pdf",
    "normal_cdf",
    "normal_invcdf",
    "invcdf_interval",
    "mixture_cdf",
    "student_t_p_value",
    "binomial_pmf",
    "distribution_from_dict",
    "distribution_to_dict",
]


def _check_finite(**values: float) -> None:
    for name, value in values.items():
        if not np.all(np.isfinite(value)):
            raise ValueError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class Interval:
    """Closed interval ``[lo, hi]``."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo <= self.hi:
            raise ValueError(f"interval requires lo <= hi, got [{self.lo}, {self.hi}]")

    def __contains__(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class Normal:
    """Normal distribution parameterised by mean and *standard deviation*."""

    mu: float
    sigma: float

    def __post_init__(self) -> None:
        _check_finite(mu=self.mu, sigma=self.sigma)
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")

    @property
    def mean(self) -> float:
        return self.mu

    def pdf(self, x):
        return normal_pdf(self.mu, self.sigma, x)

    def cdf(self, x):
        return special.ndtr((np.asarray(x, dtype=float) - self.mu) / self.sigma)

    def invcdf(self, p):
        # p = 0 and p = 1 map to -inf / +inf (the support endpoints)
        return self.mu + self.sigma * special.ndtri(np.asarray(p, dtype=float))


@dataclass(frozen=True)
class Uniform:
    """Continuous uniform distribution on ``[a, b]``."""

    a: float
    b: float

    def __post_init__(self) -> None:
        _check_finite(a=self.a, b=self.b)
        if not self.b > self.a:
            raise ValueError(f"Uniform requires b > a, got a={self.a}, b={self.b}")

    @property
    def mean(self) -> float:
        return 0.5 * (self.a + self.b)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.a) & (x <= self.b), 1.0 / (self.b - self.a), 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip((x - self.a) / (self.b - self.a), 0.0, 1.0)

    def invcdf(self, p):
        return self.a + np.asarray(p, dtype=float) * (self.b - self.a)


@dataclass(frozen=True)
class Mixture:
    """Equal-weight mixture of :class:`Normal` members."""

    members: tuple[Normal, ...]

    def __init__(self, members: Iterable[Normal]):
        members = tuple(members)
        if not members:
            raise ValueError("Mixture needs at least one member")
        if not all(isinstance(m, Normal) for m in members):
            raise TypeError("Mixture members must be Normal")
        object.__setattr__(self, "members", members)

    @property
    def mean(self) -> float:
        return float(np.mean([m.mu for m in self.members]))

    def _params(self):
        mus = np.array([m.mu for m in self.members])
        sigmas = np.array([m.sigma for m in self.members])
        return mus, sigmas

    def pdf(self, x):
        mus, sigmas = self._params()
        x = np.asarray(x, dtype=float)[..., None]
        return np.mean(np.exp(-0.5 * ((x - mus) / sigmas) ** 2) / (sigmas * math.sqrt(2 * math.pi)), axis=-1)

    def cdf(self, x):
        mus, sigmas = self._params()
        x = np.asarray(x, dtype=float)[..., None]
        return np.mean(special.ndtr((x - mus) / sigmas), axis=-1)

    def invcdf(self, p):
        p = np.asarray(p, dtype=float)
        out = np.empty(p.shape)
        mus, sigmas = self._params()
        lo, hi = np.min(mus - 40 * sigmas), np.max(mus + 40 * sigmas)
        for idx, pi in np.ndenumerate(p):
            if pi <= 0.0:
                out[idx] = -np.inf
            elif pi >= 1.0:
                out[idx] = np.inf
            else:
                out[idx] = optimize.brentq(lambda x: float(self.cdf(x)) - pi, lo, hi, xtol=1e-14, rtol=1e-15)
        return out if out.ndim else float(out)


PredictiveDistribution = Union[Normal, Uniform, Mixture]


class NormalArray(Sequence):
    """A vector of independent normal predictions, stored as two arrays.

    Behaves as a read-only sequence of :class:`Normal`; integer-array and
    boolean indexing return another ``NormalArray``.
    """

    __slots__ = ("mu", "sigma")

    def __init__(self, mu, sigma):
        mu = np.asarray(mu, dtype=float)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), mu.shape).copy()
        if mu.ndim != 1:
            raise ValueError("NormalArray expects 1-d parameter arrays")
        _check_finite(mu=mu, sigma=sigma)
        if np.any(sigma <= 0):
            raise ValueError("every sigma must be > 0")
        mu.setflags(write=False)
        sigma.setflags(write=False)
        self.mu = mu
        self.sigma = sigma

    @classmethod
    def from_normals(cls, normals: Iterable[Normal]) -> "NormalArray":
        normals = list(normals)
        return cls([d.mu for d in normals], [d.sigma for d in normals])

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            return Normal(float(self.mu[index]), float(self.sigma[index]))
        return NormalArray(self.mu[index], self.sigma[index])

    def __eq__(self, other) -> bool:
        if isinstance(other, NormalArray):
            return np.array_equal(self.mu, other.mu) and np.array_equal(self.sigma, other.sigma)
        return NotImplemented

    def __repr__(self) -> str:
        return f"NormalArray(n={len(self)})"

    @property
    def means(self) -> np.ndarray:
        return self.mu

    def cdf(self, x):
        return special.ndtr((np.asarray(x, dtype=float) - self.mu) / self.sigma)

    def invcdf(self, p):
        """Element-wise inverse cdf; ``p`` broadcasts against the vector."""
        return self.mu + self.sigma * special.ndtri(np.asarray(p, dtype=float))


def normal_pdf(mu: float, sigma: float, x):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))


def normal_cdf(mu: float, sigma: float, x):
    """Normal cdf evaluated through ``ndtr`` (erfc based, ~1e-16 absolute)."""
    _check_finite(mu=mu, sigma=sigma, x=x)
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    out = special.ndtr((np.asarray(x, dtype=float) - mu) / sigma)
    return float(out) if np.ndim(out) == 0 else out


def normal_invcdf(mu: float, sigma: float, p):
    """Normal quantile function; ``p`` must lie in the open interval (0, 1)."""
    _check_finite(mu=mu, sigma=sigma, p=p)
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr <= 0.0) | (p_arr >= 1.0)):
        raise ValueError(f"p must lie in (0, 1), got {p!r}")
    out = mu + sigma * special.ndtri(p_arr)
    return float(out) if out.ndim == 0 else out


def invcdf_interval(d: PredictiveDistribution, p: float) -> Interval:
    """Central prediction interval ``[invcdf(0.5 - p/2), invcdf(0.5 + p/2)]``.

    ``p = 1`` is accepted and returns the support of ``d`` (infinite for
    normals), which is what the calibration grid's last point needs.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if not isinstance(d, (Normal, Uniform, Mixture)):
        raise TypeError(f"unsupported distribution {type(d).__name__}")
    lo = float(d.invcdf(0.5 - p / 2))
    hi = float(d.invcdf(0.5 + p / 2))
    if not lo < hi:
        raise ValueError("degenerate distribution: empty central interval")
    return Interval(lo, hi)


def mixture_cdf(members: Sequence[Normal], x):
    """Arithmetic mean of the member cdfs at ``x``."""
    if len(members) == 0:
        raise ValueError("mixture_cdf needs at least one member")
    return Mixture(members).cdf(x)


def student_t_p_value(t_stat, dof) -> float:
    """Two-sided p-value ``2 * (1 - F_t(|t|; dof))``."""
    dof_arr = np.asarray(dof)
    if np.any(dof_arr < 1):
        raise ValueError(f"dof must be >= 1, got {dof!r}")
    t = np.abs(np.asarray(t_stat, dtype=float))
    # stdtr of the lower tail avoids cancellation in 1 - cdf
    out = np.minimum(2.0 * special.stdtr(dof_arr, -t), 1.0)
    return float(out) if out.ndim == 0 else out


def binomial_pmf(n: int, p_fail: float, k: int) -> float:
    """``C(n, k) p^k (1-p)^(n-k)``, stable for ``n`` up to and beyond 10^6."""
    if n < 0 or k < 0:
        raise ValueError("n and k must be non-negative")
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    if not 0.0 <= p_fail <= 1.0:
        raise ValueError(f"p_fail must be a probability, got {p_fail}")
    # boost's binomial pmf: no overflow and ~1e-15 relative error at n = 1000
    return float(stats.binom.pmf(k, n, p_fail))


def exact_fraction(value: float) -> Fraction:
    """Rational reading of a decimal parameter such as ``0.01`` -> 1/100."""
    return Fraction(repr(float(value)))


def distribution_to_dict(d: PredictiveDistribution) -> dict:
    if isinstance(d, Normal):
        return {"type": "normal", "params": {"mu": d.mu, "sigma": d.sigma}}
    if isinstance(d, Uniform):
        return {"type": "uniform", "params": {"a": d.a, "b": d.b}}
    if isinstance(d, Mixture):
        return {
            "type": "mixture",
            "params": {"members": [{"mu": m.mu, "sigma": m.sigma} for m in d.members]},
        }
    raise TypeError(f"unsupported distribution {type(d).__name__}")


def distribution_from_dict(obj: dict) -> PredictiveDistribution:
    kind = obj.get("type")
    params = obj.get("params")
    if not isinstance(params, dict):
        raise ValueError("distribution needs a 'params' object")
    if kind == "normal":
        return Normal(float(params["mu"]), float(params["sigma"]))
    if kind == "uniform":
        return Uniform(float(params["a"]), float(params["b"]))
    if kind == "mixture":
        return Mixture(Normal(float(m["mu"]), float(m["sigma"])) for m in params["members"])
    raise ValueError(f"unknown distribution type {kind!r}")
