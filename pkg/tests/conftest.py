"""Shared oracles.  Everything here is independent of the library code:
high-precision mpmath evaluations and exact rational arithmetic."""

from fractions import Fraction
from math import comb

import mpmath
import pytest

mpmath.mp.dps = 40


def mp_normal_cdf(x, mu=0.0, sigma=1.0):
    z = (mpmath.mpf(x) - mu) / sigma
    return float(mpmath.mpf(1) / 2 * mpmath.erfc(-z / mpmath.sqrt(2)))


def mp_normal_pdf(x, mu=0.0, sigma=1.0):
    z = (mpmath.mpf(x) - mu) / sigma
    return float(mpmath.exp(-z * z / 2) / (sigma * mpmath.sqrt(2 * mpmath.pi)))


def mp_t_two_sided(t, dof):
    """Two-sided tail of Student's t by quadrature of its density."""
    nu = mpmath.mpf(dof)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    density = lambda s: c * (1 + s * s / nu) ** (-(nu + 1) / 2)
    return float(2 * mpmath.quad(density, [abs(t), mpmath.inf]))


def exact_binomial_pmf(n, p: Fraction, k):
    return comb(n, k) * p**k * (1 - p) ** (n - k)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
