"""Weakly-supervised pairwise ELBO on an affine toy VAE.

A pair ``(x, x')`` comes with the set ``S`` of latent indices known to be
shared.  On those indices the posterior statistics of both sides are
replaced by their average before sampling, so the shared dimensions can only
carry information common to the pair.  The toy model is affine in both
directions, which keeps hand-written gradients short and checkable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .datamodel import CertDataset
from .statdist import Normal

__all__ = [
    "average_normals",
    "masked_pair_statistics",
    "gaussian_kl",
    "bernoulli_recon_loss",
    "PairBatch",
    "ToyVae",
    "pairwise_elbo_loss",
    "loss_and_gradient",
    "TrainingDivergedError",
    "TrainResult",
    "toy_train",
    "latent_grid",
    "RoundtripResult",
    "roundtrip_consistency",
    "write_loss_trace",
    "export_latents",
]


def average_normals(d1: Normal, d2: Normal) -> Normal:
    """Average of means and of standard deviations."""
    return Normal((d1.mu + d2.mu) / 2, (d1.sigma + d2.sigma) / 2)


def _mask(index_sets: Sequence[Sequence[int]], dim: int) -> np.ndarray:
    cache = getattr(index_sets, "_mask_cache", None)
    if cache is not None and cache[0] == dim:
        return cache[1]
    mask = np.zeros((len(index_sets), dim))
    for r, S in enumerate(index_sets):
        idx = list(S)
        if not idx:
            raise ValueError(f"pair {r}: shared index set must be non-empty")
        for i in idx:
            if not (isinstance(i, (int, np.integer)) and 0 <= i < dim):
                raise ValueError(f"pair {r}: latent index {i!r} outside 0..{dim - 1}")
        mask[r, idx] = 1.0
    return mask


class _IndexSets(tuple):
    """Tuple of index sets remembering its last dense mask."""

    _mask_cache = None


def _cached_mask(index_sets: "_IndexSets", dim: int) -> np.ndarray:
    mask = _mask(index_sets, dim)
    index_sets._mask_cache = (dim, mask)
    return mask


def masked_pair_statistics(mu_lhs, sigma_lhs, mu_rhs, sigma_rhs, shared):
    """Replace the statistics on shared dimensions by the pair average.

    Inputs are ``(n, D)`` arrays (or ``(D,)`` for one pair, with ``shared`` a
    single index set).  Returns ``(mu_hat_lhs, sigma_hat_lhs, mu_hat_rhs,
    sigma_hat_rhs)``.
    """
    arrays = [np.asarray(a, dtype=float) for a in (mu_lhs, sigma_lhs, mu_rhs, sigma_rhs)]
    single = arrays[0].ndim == 1
    if single:
        arrays = [a[None, :] for a in arrays]
        shared = [shared]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ValueError("statistics must share one shape")
    if np.any(arrays[1] <= 0) or np.any(arrays[3] <= 0):
        raise ValueError("sigmas must be positive")
    if len(shared) != arrays[0].shape[0]:
        raise ValueError("one shared index set per pair is required")
    m = _mask(shared, arrays[0].shape[1])
    mu_avg = (arrays[0] + arrays[2]) / 2
    sigma_avg = (arrays[1] + arrays[3]) / 2
    out = (
        (1 - m) * arrays[0] + m * mu_avg,
        (1 - m) * arrays[1] + m * sigma_avg,
        (1 - m) * arrays[2] + m * mu_avg,
        (1 - m) * arrays[3] + m * sigma_avg,
    )
    return tuple(o[0] for o in out) if single else out


def gaussian_kl(mu, sigma, lam: float = 1.0) -> float:
    """KL divergence from ``N(mu, diag sigma^2)`` to the prior ``N(0, lam I)``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if lam <= 0:
        raise ValueError("prior variance must be positive")
    return float(0.5 * np.sum((mu * mu + sigma * sigma) / lam - 2 * np.log(sigma) - 1 + math.log(lam)))


def bernoulli_recon_loss(logits, target) -> float:
    """Binary cross-entropy with logits, summed over elements."""
    logits = np.asarray(logits, dtype=float)
    target = np.asarray(target, dtype=float)
    if logits.shape != target.shape:
        raise ValueError("logits and target must have equal shape")
    if np.any((target < 0) | (target > 1)):
        raise ValueError("targets must lie in [0, 1]")
    # softplus(l) - t l == -[t log s(l) + (1 - t) log(1 - s(l))]
    return float(np.sum(np.logaddexp(0.0, logits) - target * logits))


@dataclass(frozen=True)
class PairBatch:
    """Paired inputs with per-pair shared latent index sets (0-based)."""

    lhs: np.ndarray
    rhs: np.ndarray
    shared_index_sets: tuple

    def __init__(self, lhs, rhs, shared_index_sets):
        lhs = np.atleast_2d(np.asarray(lhs, dtype=float))
        rhs = np.atleast_2d(np.asarray(rhs, dtype=float))
        if lhs.shape != rhs.shape:
            raise ValueError("lhs and rhs must have equal shape")
        sets = _IndexSets(frozenset(int(i) for i in S) for S in shared_index_sets)
        if len(sets) != len(lhs):
            raise ValueError("one shared index set per pair is required")
        if any(not S for S in sets):
            raise ValueError("shared index sets must be non-empty")
        object.__setattr__(self, "lhs", lhs)
        object.__setattr__(self, "rhs", rhs)
        object.__setattr__(self, "shared_index_sets", sets)

    def __len__(self) -> int:
        return len(self.lhs)

    @classmethod
    def from_problem(cls, problem) -> "PairBatch":
        return cls(problem.lhs, problem.rhs, problem.shared_index_sets)

    def swapped(self) -> "PairBatch":
        return PairBatch(self.rhs, self.lhs, self.shared_index_sets)


_PARAMS = ("enc_w_mu", "enc_b_mu", "enc_w_logvar", "enc_b_logvar", "dec_w", "dec_b")


@dataclass
class ToyVae:
    """Affine encoder ``x -> (mu, logvar)`` and affine decoder ``z -> logits``.

    The encoder sees ``(x - input_shift) / input_scale``; these two fixed
    vectors only improve conditioning and are not trained.
    """

    enc_w_mu: np.ndarray      # (D, d)
    enc_b_mu: np.ndarray      # (D,)
    enc_w_logvar: np.ndarray  # (D, d)
    enc_b_logvar: np.ndarray  # (D,)
    dec_w: np.ndarray         # (d, D)
    dec_b: np.ndarray         # (d,)
    input_shift: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        for name in _PARAMS:
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        D, d = self.enc_w_mu.shape
        self.input_shift = np.zeros(d) if self.input_shift is None else np.array(self.input_shift, dtype=float)
        self.input_scale = np.ones(d) if self.input_scale is None else np.array(self.input_scale, dtype=float)
        if self.input_shift.shape != (d,) or self.input_scale.shape != (d,) or np.any(self.input_scale <= 0):
            raise ValueError("input_shift and input_scale must be length-d vectors, scale > 0")
        expected = {
            "enc_b_mu": (D,), "enc_w_logvar": (D, d), "enc_b_logvar": (D,),
            "dec_w": (d, D), "dec_b": (d,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def init(cls, input_dim: int, latent_dim: int, seed, scale: float = 0.1) -> "ToyVae":
        rng = np.random.default_rng(seed)
        return cls(
            enc_w_mu=scale * rng.standard_normal((latent_dim, input_dim)),
            enc_b_mu=np.zeros(latent_dim),
            enc_w_logvar=np.zeros((latent_dim, input_dim)),
            enc_b_logvar=np.zeros(latent_dim),
            dec_w=scale * rng.standard_normal((input_dim, latent_dim)),
            dec_b=np.zeros(input_dim),
        )

    @property
    def input_dim(self) -> int:
        return self.enc_w_mu.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.enc_w_mu.shape[0]

    @property
    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in _PARAMS)

    def copy(self) -> "ToyVae":
        return ToyVae(*(getattr(self, n).copy() for n in _PARAMS), self.input_shift.copy(), self.input_scale.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in _PARAMS])

    def with_flat(self, theta) -> "ToyVae":
        theta = np.asarray(theta, dtype=float)
        parts, start = [], 0
        for n in _PARAMS:
            shape = getattr(self, n).shape
            size = int(np.prod(shape))
            parts.append(theta[start:start + size].reshape(shape))
            start += size
        if start != theta.size:
            raise ValueError("parameter vector has the wrong length")
        return ToyVae(*parts, self.input_shift, self.input_scale)

    def encode(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Posterior ``(mu, sigma)`` for inputs of shape ``(n, d)``."""
        u = self.standardise(x)
        mu = u @ self.enc_w_mu.T + self.enc_b_mu
        sigma = np.exp(0.5 * (u @ self.enc_w_logvar.T + self.enc_b_logvar))
        return mu, sigma

    def standardise(self, x) -> np.ndarray:
        return (np.atleast_2d(np.asarray(x, dtype=float)) - self.input_shift) / self.input_scale

    def decode_logits(self, z) -> np.ndarray:
        return np.atleast_2d(np.asarray(z, dtype=float)) @ self.dec_w.T + self.dec_b

    def decode(self, z) -> np.ndarray:
        """Reconstruction mean in input space."""
        return expit(self.decode_logits(z))

    def encode_mean(self, x) -> np.ndarray:
        return self.encode(x)[0]


def _noise(seed, n: int, dim: int, n_samples: int) -> np.ndarray:
    """Standard normal draws of shape ``(n_samples, n, dim)``.

    Both sides of a pair reuse the same draw.  Each loss term depends on one
    side only, so the estimate stays unbiased, and swapping the sides leaves
    it bit-identical.
    """
    return np.random.default_rng(seed).standard_normal((n_samples, n, dim))


def loss_and_gradient(model: ToyVae, batch: PairBatch, rng_seed, n_samples: int = 1,
                      lam: float = 1.0, with_gradient: bool = True):
    """Pairwise loss (negated ELBO, mean over pairs) and its gradient.

    The gradient is returned as a :class:`ToyVae` holding parameter
    derivatives, or ``None`` when ``with_gradient`` is false.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = len(batch)
    D = model.latent_dim
    m = _cached_mask(batch.shared_index_sets, D)
    xs = (batch.lhs, batch.rhs)
    mus, sigmas = zip(*(model.encode(x) for x in xs))
    mu_avg = (mus[0] + mus[1]) / 2
    s_avg = (sigmas[0] + sigmas[1]) / 2
    mu_hat = [(1 - m) * mu + m * mu_avg for mu in mus]
    s_hat = [(1 - m) * s + m * s_avg for s in sigmas]
    eps = _noise(rng_seed, n, D, n_samples)

    kl = sum(0.5 * np.sum((mh**2 + sh**2) / lam - 2 * np.log(sh) - 1 + math.log(lam))
             for mh, sh in zip(mu_hat, s_hat))
    recon = 0.0
    d_mu_hat = [(mh / lam) for mh in mu_hat]
    d_s_hat = [(sh / lam - 1 / sh) for sh in s_hat]
    g_dec_w = np.zeros_like(model.dec_w)
    g_dec_b = np.zeros_like(model.dec_b)
    for r in range(n_samples):
        for side in range(2):
            z = mu_hat[side] + s_hat[side] * eps[r]
            logits = model.decode_logits(z)
            recon += np.sum(np.logaddexp(0.0, logits) - xs[side] * logits) / n_samples
            if with_gradient:
                d_logits = (expit(logits) - xs[side]) / n_samples
                g_dec_w += d_logits.T @ z
                g_dec_b += d_logits.sum(axis=0)
                dz = d_logits @ model.dec_w
                d_mu_hat[side] = d_mu_hat[side] + dz
                d_s_hat[side] = d_s_hat[side] + dz * eps[r]
    loss = float((recon + kl) / n)
    if not with_gradient:
        return loss, None

    half_mu = m * (d_mu_hat[0] + d_mu_hat[1]) / 2
    half_s = m * (d_s_hat[0] + d_s_hat[1]) / 2
    grads = []
    for side in range(2):
        d_mu = (1 - m) * d_mu_hat[side] + half_mu
        d_s = (1 - m) * d_s_hat[side] + half_s
        d_logvar = d_s * sigmas[side] / 2
        u = model.standardise(xs[side])
        grads.append((d_mu.T @ u, d_mu.sum(0), d_logvar.T @ u, d_logvar.sum(0)))
    enc = [(a + b) / n for a, b in zip(*grads)]
    return loss, ToyVae(*enc, g_dec_w / n, g_dec_b / n)


def pairwise_elbo_loss(model: ToyVae, batch: PairBatch, rng_seed, n_samples: int = 1,
                       lam: float = 1.0) -> float:
    """Mean over pairs of reconstruction plus KL terms for both sides, using
    the averaged statistics on shared dimensions."""
    return loss_and_gradient(model, batch, rng_seed, n_samples, lam, with_gradient=False)[0]


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainResult:
    model: ToyVae
    loss_trace: list[float] = field(default_factory=list)

    def smoothed_trace(self, window: int = 20) -> np.ndarray:
        trace = np.asarray(self.loss_trace)
        if trace.size < window:
            return trace
        return np.convolve(trace, np.ones(window) / window, mode="valid")


def toy_train(problem, epochs: int, seed, latent_dim: Optional[int] = None, lr: float = 1e-2,
              n_samples: int = 1, lam: float = 1.0, init_scale: float = 0.1,
              batch: Optional[PairBatch] = None) -> TrainResult:
    """Full-batch gradient descent on the pairwise loss.

    ``problem`` is a paired toy problem (see ``simstudy.gen_toy_disentangled``).
    ``latent_dim`` defaults to ``k + l``.  Spare dimensions are harmful here:
    the averaged loss only penalises foreign factors in a shared dimension, so
    with room to spare the content dimensions tend to collapse to the prior.
    Each epoch draws fresh reparameterisation noise from a stream split off
    ``seed``.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch is None:
        batch = PairBatch.from_problem(problem)
    if latent_dim is None:
        latent_dim = problem.k + problem.l
    seq = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    init_seed, noise_seq = seq.spawn(2)
    model = ToyVae.init(batch.lhs.shape[1], latent_dim, init_seed, init_scale)
    pooled = np.vstack([batch.lhs, batch.rhs])
    model.input_shift = pooled.mean(axis=0)
    model.input_scale = np.maximum(pooled.std(axis=0), 1e-6)
    trace: list[float] = []
    epoch_seeds = noise_seq.spawn(epochs)
    for epoch in range(epochs):
        # overflow shows up as a non-finite loss or parameter, reported below
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            loss, grad = loss_and_gradient(model, batch, epoch_seeds[epoch], n_samples, lam)
        if not math.isfinite(loss):
            raise TrainingDivergedError(epoch)
        trace.append(loss)
        for name in _PARAMS:
            setattr(model, name, getattr(model, name) - lr * getattr(grad, name))
        if not np.all(np.isfinite(model.flat())):
            raise TrainingDivergedError(epoch)
    return TrainResult(model, trace)


def latent_grid(dim: int, points_per_dim: int = 5, radius: float = 2.0) -> np.ndarray:
    """Regular grid over the prior box ``[-radius, radius]^dim``."""
    axis = np.linspace(-radius, radius, points_per_dim)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass(frozen=True)
class RoundtripResult:
    max_deviation: float
    mean_deviation: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.threshold


def roundtrip_consistency(encode: Callable, decode: Callable, z_grid, threshold: float = 0.1) -> RoundtripResult:
    """Deviation ``max_inf |z - encode(decode(z))|`` over latent points.

    For a :class:`ToyVae` pass ``model.encode_mean`` and ``model.decode``.
    """
    z = np.atleast_2d(np.asarray(z_grid, dtype=float))
    back = np.asarray(encode(decode(z)), dtype=float).reshape(z.shape)
    dev = np.max(np.abs(z - back), axis=1)
    return RoundtripResult(float(dev.max()), float(dev.mean()), threshold)


def write_loss_trace(trace: Sequence[float], path) -> None:
    """CSV with columns epoch, loss."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(trace):
            writer.writerow([epoch, repr(float(loss))])


def export_latents(model: ToyVae, problem, x=None, factors=None) -> CertDataset:
    """Encode inputs (default: the left-hand side of every pair) into a
    dataset with one ensemble member.

    The first ``k`` latents are content, the rest style.  Style labels beyond
    the problem's true style factors are unknown and stored as NaN; the
    content factors double as observed targets.
    """
    if x is None:
        x, factors = problem.lhs, problem.factors_lhs
    k = problem.k
    mu, sigma = model.encode(x)
    n, D = mu.shape
    if D <= k:
        raise ValueError("latent dimension must exceed the number of content factors")
    style = np.full((n, D - k), np.nan)
    n_labels = min(problem.l, D - k)
    style[:, :n_labels] = factors[:, k:k + n_labels]
    return CertDataset(
        ids=[f"z{i:06d}" for i in range(n)],
        v_content=factors[:, :k],
        v_style=style,
        y_obs=factors[:, :k],
        latent_mu=mu[:, None, :],
        latent_sigma=sigma[:, None, :],
        metadata={"source": "toy_train"},
    )
