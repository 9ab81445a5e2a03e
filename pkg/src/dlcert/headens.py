"""Parameter-free model head, median ensemble selection and the
Gaussian-mixture out-of-distribution rule.

A latent ``N(mu, sigma)`` whose population prior is ``N(0, 1)`` is mapped to
the operating range ``[a, b]`` through the standard normal cdf; the output
standard deviation follows from the local slope of that map.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .datamodel import CertDataset, LatentGaussian, OperatingRange
from .statdist import Mixture, Normal, NormalArray

__all__ = [
    "HeadConfig",
    "head_transform",
    "head_transform_arrays",
    "calibrate_orientation",
    "ensemble_median_select",
    "outside_mass",
    "OodResult",
    "ood_detect",
    "run_head_batch",
    "TWO_SIGMA_TAIL",
]

# mass of a normal outside mean +- 2 sd
TWO_SIGMA_TAIL = float(2.0 * special.ndtr(-2.0))


@dataclass(frozen=True)
class HeadConfig:
    range: OperatingRange
    flip: tuple[bool, ...]

    def __init__(self, range: OperatingRange, flip: Optional[Sequence[bool]] = None):
        if flip is None:
            warnings.warn("no orientation calibration given; assuming no dimension is flipped", stacklevel=2)
            flip = (False,) * len(range)
        flip = tuple(bool(f) for f in flip)
        if len(flip) != len(range):
            raise ValueError(f"flip has {len(flip)} entries for {len(range)} content dimensions")
        object.__setattr__(self, "range", range)
        object.__setattr__(self, "flip", flip)


def head_transform(latent: LatentGaussian, a: float, b: float, flip: bool = False) -> Normal:
    """Map a latent Gaussian to ``N(y, sigma_y)`` on ``[a, b]``.

    ``y = Phi(mu) (b - a) + a`` (``Phi(mu)`` replaced by ``1 - Phi(mu)`` when
    flipped) and ``sigma_y = sigma * phi(mu) * (b - a)``.
    """
    if not b > a:
        raise ValueError(f"need b > a, got [{a}, {b}]")
    if not latent.sigma > 0:
        raise ValueError("latent sigma must be > 0")
    y, sigma_y = head_transform_arrays(latent.mu, latent.sigma, a, b, flip)
    return Normal(float(y), float(sigma_y))


def head_transform_arrays(mu, sigma, a, b, flip=False):
    """Vectorised :func:`head_transform` returning ``(y, sigma_y)`` arrays."""
    mu = np.asarray(mu, dtype=float)
    u = special.ndtr(mu)
    u = np.where(flip, special.ndtr(-mu), u)
    width = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    y = u * width + a
    sigma_y = np.asarray(sigma, dtype=float) * np.exp(-0.5 * mu * mu) / math.sqrt(2 * math.pi) * width
    # the density underflows beyond |mu| ~ 38; keep the output a valid normal
    return y, np.maximum(sigma_y, np.finfo(float).tiny)


def calibrate_orientation(pairs_per_dim: Sequence[Sequence[tuple[float, float]]]) -> tuple[bool, ...]:
    """Flip flags from annotated pairs.

    ``pairs_per_dim[i]`` lists latent means ``(mu, mu')`` for inputs whose
    content value i satisfies ``v << v'``.  A dimension is flipped when most
    pairs have ``mu > mu'``; ties keep the unflipped orientation.
    """
    flags = []
    for i, pairs in enumerate(pairs_per_dim):
        if not pairs:
            raise ValueError(f"content dimension {i} has no annotated pair")
        votes = sum(1 if mu > mu_prime else -1 if mu < mu_prime else 0 for mu, mu_prime in pairs)
        flags.append(votes > 0)
    return tuple(flags)


def ensemble_median_select(member_mus: Sequence[float], member_sigmas: Optional[Sequence[float]] = None) -> int:
    """Index of the member holding the median mean (lower median for even E).

    Equal means are ordered by ``member_sigmas`` when given, then by member
    index, so the selected distribution does not depend on member order.
    """
    mus = np.asarray(member_mus, dtype=float)
    if mus.size == 0:
        raise ValueError("need at least one ensemble member")
    sigmas = np.zeros_like(mus) if member_sigmas is None else np.asarray(member_sigmas, dtype=float)
    order = np.lexsort((sigmas, mus))
    return int(order[(mus.size - 1) // 2])


def outside_mass(outputs: Sequence[Normal], selected: int) -> float:
    """Mixture mass outside ``selected``'s mean +- 2 standard deviations."""
    ref = outputs[selected]
    gmm = Mixture(outputs)
    lo, hi = ref.mu - 2 * ref.sigma, ref.mu + 2 * ref.sigma
    # upper tail through the survival function keeps precision near 1
    upper = float(np.mean([special.ndtr((m.mu - hi) / m.sigma) for m in outputs]))
    return float(gmm.cdf(lo)) + upper


@dataclass(frozen=True)
class OodResult:
    flags: tuple[bool, ...]
    ood: bool
    outside_mass: tuple[float, ...]
    selected: tuple[int, ...]
    outputs: tuple[Normal, ...]


def ood_detect(members: Sequence[Sequence[LatentGaussian]], config: HeadConfig,
               tau_ood: float = 0.15) -> OodResult:
    """OOD decision for one input.

    ``members[e][i]`` is ensemble member e's content latent i.  Every member
    is pushed through the head; the median member (by latent mean) gives the
    prediction and the mixture of all members is checked against its two-sd
    band.
    """
    if len(members) < 2:
        raise ValueError("OOD detection needs at least two ensemble members")
    if not 0.0 < tau_ood < 1.0:
        raise ValueError("tau_ood must lie in (0, 1)")
    k = len(config.range)
    flags, masses, selected, outputs = [], [], [], []
    for i in range(k):
        a, b = config.range[i]
        outs = [head_transform(m[i], a, b, config.flip[i]) for m in members]
        sel = ensemble_median_select([m[i].mu for m in members], [m[i].sigma for m in members])
        mass = outside_mass(outs, sel)
        flags.append(mass > tau_ood)
        masses.append(mass)
        selected.append(sel)
        outputs.append(outs[sel])
    return OodResult(tuple(flags), any(flags), tuple(masses), tuple(selected), tuple(outputs))


def run_head_batch(dataset: CertDataset, config: HeadConfig, out_path, tau_ood: float = 0.15) -> CertDataset:
    """Apply the head and OOD rule to every record with latents.

    Writes one JSON line ``{id, y, sigma_y, ood_flags, ood, outside_mass}``
    per record and returns the dataset with the head's predictions as
    ``y_pred`` (one output per content dimension).
    """
    if dataset.latent_mu is None:
        raise ValueError("dataset has no latents")
    k = len(config.range)
    ys = np.empty((dataset.n, k))
    sds = np.empty((dataset.n, k))
    with Path(out_path).open("w", encoding="utf-8", newline="\n") as fh:
        for r in range(dataset.n):
            members = [
                [LatentGaussian(float(mu), float(sg)) for mu, sg in zip(dataset.latent_mu[r, e, :k],
                                                                        dataset.latent_sigma[r, e, :k])]
                for e in range(dataset.E)
            ]
            if dataset.E >= 2:
                res = ood_detect(members, config, tau_ood)
                outs, flags, masses, ood = res.outputs, list(res.flags), list(res.outside_mass), res.ood
            else:
                outs = [head_transform(members[0][i], *config.range[i], config.flip[i]) for i in range(k)]
                flags, masses, ood = None, None, None
            ys[r] = [o.mu for o in outs]
            sds[r] = [o.sigma for o in outs]
            fh.write(json.dumps({
                "id": dataset.ids[r],
                "y": ys[r].tolist(),
                "sigma_y": sds[r].tolist(),
                "ood_flags": flags,
                "ood": ood,
                "outside_mass": masses,
            }, separators=(",", ":")) + "\n")
    preds = tuple(NormalArray(ys[:, i], sds[:, i]) for i in range(k))
    if dataset.m == k:
        return dataset.with_predictions(preds)
    return dataset
