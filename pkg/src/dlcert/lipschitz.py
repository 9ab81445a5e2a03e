"""Lower/upper Lipschitz bounds for layer stacks, singular-value bounds by
power iteration, and an empirical probe that samples point pairs.

All norms are Euclidean.  The probe only checks consistency with the
analytic bounds; it cannot certify them, and Euclidean distance between raw
inputs is a stand-in for the semantic input distance.
"""

from __future__ import annotations

import math
from fractions import Fraction
import warnings
from dataclasses import dataclass
from functools import singledispatch
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "Residual",
    "Dense",
    "LeakyRelu",
    "Composition",
    "LayerSpec",
    "bilipschitz_bounds",
    "singular_value_bounds",
    "ConvergenceError",
    "empirical_lipschitz_probe",
    "random_residual_net",
    "layer_from_dict",
]


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Residual:
    """``x + f(x)`` with ``f`` alpha-Lipschitz."""

    alpha: float

    def __post_init__(self) -> None:
        if not self.alpha >= 0:
            raise ValueError("residual branch constant must be >= 0")


@dataclass(frozen=True)
class Dense:
    """Linear layer described by its extreme singular values."""

    sigma_min: float
    sigma_max: float

    def __post_init__(self) -> None:
        if not 0 <= self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 <= sigma_min <= sigma_max")

    @classmethod
    def from_matrix(cls, matrix) -> "Dense":
        return cls(*singular_value_bounds(matrix))


@dataclass(frozen=True)
class LeakyRelu:
    alpha: float

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError("leaky relu slope must lie in (0, 1)")


@dataclass(frozen=True)
class Composition:
    layers: tuple

    def __init__(self, layers: Sequence["LayerSpec"]):
        object.__setattr__(self, "layers", tuple(layers))


LayerSpec = Union[Residual, Dense, LeakyRelu, Composition]


@singledispatch
def bilipschitz_bounds(spec) -> tuple[float, float]:
    """``(lower, upper)`` with ``lower |x - x'| <= |f(x) - f(x')| <= upper |x - x'|``."""
    raise TypeError(f"unsupported layer spec {type(spec).__name__}")


@bilipschitz_bounds.register
def _(spec: Residual) -> tuple[float, float]:
    if spec.alpha >= 1:
        warnings.warn(f"residual branch constant {spec.alpha} >= 1: lower bound is vacuous", stacklevel=3)
        return 0.0, 1.0 + spec.alpha
    return 1.0 - spec.alpha, 1.0 + spec.alpha


@bilipschitz_bounds.register
def _(spec: Dense) -> tuple[float, float]:
    return spec.sigma_min, spec.sigma_max


@bilipschitz_bounds.register
def _(spec: LeakyRelu) -> tuple[float, float]:
    return spec.alpha, 1.0


@bilipschitz_bounds.register
def _(spec: Composition) -> tuple[float, float]:
    # multiply the shortest decimal forms exactly so that, e.g., three
    # Residual(0.1) give 0.729 rather than 0.7290000000000001
    lower, upper = Fraction(1), Fraction(1)
    for layer in spec.layers:
        lo, hi = bilipschitz_bounds(layer)
        lower *= Fraction(repr(float(lo)))
        upper *= Fraction(repr(float(hi)))
    return float(lower), float(upper)


def layer_from_dict(obj: dict) -> LayerSpec:
    """Build a spec from ``{"kind": "residual", "alpha": 0.1}``-style dicts."""
    kind = obj.get("kind")
    if kind == "residual":
        return Residual(float(obj["alpha"]))
    if kind == "leaky_relu":
        return LeakyRelu(float(obj["alpha"]))
    if kind == "dense":
        if "matrix" in obj:
            return Dense.from_matrix(np.asarray(obj["matrix"], dtype=float))
        return Dense(float(obj["sigma_min"]), float(obj["sigma_max"]))
    if kind == "composition":
        return Composition([layer_from_dict(o) for o in obj["layers"]])
    raise ValueError(f"unknown layer kind {kind!r}")


def _power(apply: Callable[[np.ndarray], np.ndarray], dim: int, tol: float, max_iter: int, what: str):
    """Dominant eigenpair of a symmetric PSD operator (Rayleigh quotient)."""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = apply(v)
        lam = float(v @ w)
        resid = np.linalg.norm(w - lam * v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, it
        if resid <= tol * max(abs(lam), np.finfo(float).tiny):
            return lam, it
        v = w / norm
    raise ConvergenceError(f"{what}: power iteration did not converge in {max_iter} iterations")


def singular_value_bounds(matrix, tol: float = 1e-10, max_iter: int = 10_000) -> tuple[float, float]:
    """``(sigma_min, sigma_max)`` of ``matrix`` viewed as a map ``x -> M x``.

    ``sigma_max`` comes from power iteration on ``M^T M``; ``sigma_min`` from
    inverse iteration on ``M^T M`` (0 when ``M`` has a non-trivial null
    space, e.g. more columns than rows).
    """
    M = np.asarray(matrix, dtype=float)
    if M.ndim != 2 or M.size == 0:
        raise ValueError("expected a non-empty 2-d matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix entries must be finite")
    gram = M.T @ M
    lam_max, _ = _power(lambda v: gram @ v, gram.shape[0], tol, max_iter, "sigma_max")
    sigma_max = math.sqrt(max(lam_max, 0.0))
    if M.shape[0] < M.shape[1] or sigma_max == 0.0:
        return 0.0, sigma_max
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        return 0.0, sigma_max

    def solve(v):
        return np.linalg.solve(chol.T, np.linalg.solve(chol, v))

    mu_max, _ = _power(solve, gram.shape[0], tol, max_iter, "sigma_min")
    sigma_min = math.sqrt(1.0 / mu_max) if mu_max > 0 else 0.0
    return min(sigma_min, sigma_max), sigma_max


def empirical_lipschitz_probe(f: Callable, lower, upper, n_pairs: int, seed, batched: bool = False):
    """Extreme ratios ``|f(x) - f(x')| / |x - x'|`` over random pairs drawn
    uniformly from the box ``[lower, upper]``.

    With ``batched=True``, ``f`` receives an ``(n, d)`` array and must return
    ``(n, m)``; otherwise it is called point by point.  Coincident pairs
    are redrawn (up to 100 rounds).
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    rng = np.random.default_rng(seed)
    x = rng.uniform(lower, upper, size=(n_pairs, lower.size))
    x2 = rng.uniform(lower, upper, size=(n_pairs, lower.size))
    dist = np.linalg.norm(x - x2, axis=1)
    for _ in range(100):
        bad = dist == 0
        if not bad.any():
            break
        x2[bad] = rng.uniform(lower, upper, size=(int(bad.sum()), lower.size))
        dist = np.linalg.norm(x - x2, axis=1)
    else:
        raise ValueError("could not draw distinct points; is the box degenerate?")

    def evaluate(points):
        if batched:
            return np.asarray(f(points), dtype=float).reshape(len(points), -1)
        return np.array([np.atleast_1d(np.asarray(f(p), dtype=float)) for p in points])

    ratios = np.linalg.norm(evaluate(x) - evaluate(x2), axis=1) / dist
    return float(ratios.min()), float(ratios.max())


def random_residual_net(dim: int, n_layers: int, alpha: float, seed) -> Callable[[np.ndarray], np.ndarray]:
    """Batched residual network ``x <- x + tanh(W x + b)`` whose weight
    matrices are rescaled to spectral norm ``alpha`` (tanh is 1-Lipschitz,
    so each branch is alpha-Lipschitz)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for _ in range(n_layers):
        W = rng.standard_normal((dim, dim))
        W *= alpha / np.linalg.norm(W, 2)
        weights.append(W)
        biases.append(rng.standard_normal(dim))

    def net(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        for W, b in zip(weights, biases):
            x = x + np.tanh(x @ W.T + b)
        return x

    return net
