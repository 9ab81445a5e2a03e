"""Evaluation-set schema and JSON Lines I/O.

One record per line::

    {"id": "r0", "v_content": [..k..], "v_style": [..l.., null for unlabeled],
     "y_obs": [..m..], "y_pred": [{"type": "normal", "params": {...}}, ..m..],
     "latents": [[{"mu": .., "sigma": ..}, ..k+l..], ..E..]}

``y_pred`` and ``latents`` are optional but, when present, must be present on
every record.  In memory a :class:`CertDataset` is column oriented so that the
statistical tests can operate on whole arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .statdist import (
    Mixture,
    Normal,
    NormalArray,
    PredictiveDistribution,
    Uniform,
    distribution_from_dict,
    distribution_to_dict,
)

__all__ = [
    "DatasetError",
    "LatentGaussian",
    "OperatingRange",
    "CertRecord",
    "CertDataset",
    "DatasetSchema",
    "load_dataset",
    "write_dataset",
    "dumps_record",
    "prediction_column",
]


class DatasetError(ValueError):
    """Raised for malformed or inconsistent evaluation data."""


@dataclass(frozen=True)
class LatentGaussian:
    mu: float
    sigma: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ValueError("latent mu and sigma must be finite")
        if not self.sigma > 0:
            raise ValueError(f"latent sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class OperatingRange:
    """Per content dimension interval ``[a_i, b_i]``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __init__(self, lower: Iterable[float], upper: Iterable[float]):
        lower = tuple(float(v) for v in lower)
        upper = tuple(float(v) for v in upper)
        if len(lower) != len(upper):
            raise ValueError("lower and upper bounds differ in length")
        for i, (a, b) in enumerate(zip(lower, upper)):
            if not b > a:
                raise ValueError(f"operating range {i}: need b > a, got [{a}, {b}]")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]]) -> "OperatingRange":
        pairs = list(pairs)
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    def __len__(self) -> int:
        return len(self.lower)

    def __getitem__(self, i: int) -> tuple[float, float]:
        return self.lower[i], self.upper[i]


@dataclass(frozen=True)
class CertRecord:
    id: str
    v_content: tuple[float, ...]
    v_style: tuple[Optional[float], ...]
    y_obs: tuple[float, ...]
    y_pred: Optional[tuple[PredictiveDistribution, ...]] = None
    latents: Optional[tuple[tuple[LatentGaussian, ...], ...]] = None


@dataclass(frozen=True)
class DatasetSchema:
    """Expected dimensions; ``None`` means "take it from the first record"."""

    k: Optional[int] = None
    l: Optional[int] = None
    m: Optional[int] = None
    E: Optional[int] = None


def prediction_column(dists: Sequence[PredictiveDistribution]) -> Sequence[PredictiveDistribution]:
    """Pack a list of predictions into a :class:`NormalArray` when possible."""
    if isinstance(dists, NormalArray):
        return dists
    dists = list(dists)
    if dists and all(type(d) is Normal for d in dists):
        return NormalArray.from_normals(dists)
    return tuple(dists)


def _take(column: Sequence[PredictiveDistribution], idx: np.ndarray):
    if isinstance(column, NormalArray):
        return column[idx]
    return tuple(column[i] for i in idx)


@dataclass(frozen=True, eq=False)
class CertDataset:
    """Column-oriented evaluation set.

    ``v_style`` uses NaN for missing style labels.  ``y_pred`` holds one
    sequence of predictions per output dimension.  Latent statistics are
    arrays of shape ``(n, E, k + l)``.
    """

    ids: tuple[str, ...]
    v_content: np.ndarray
    v_style: np.ndarray
    y_obs: np.ndarray
    y_pred: Optional[tuple[Sequence[PredictiveDistribution], ...]] = None
    latent_mu: Optional[np.ndarray] = None
    latent_sigma: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.ids)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        for name in ("v_content", "v_style", "y_obs"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr.reshape(n, -1) if n else arr.reshape(0, 0)
            if arr.shape[0] != n:
                raise DatasetError(f"{name} has {arr.shape[0]} rows, expected {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if len(set(self.ids)) != n:
            raise DatasetError("record ids must be unique")
        if self.y_pred is not None:
            cols = tuple(prediction_column(c) for c in self.y_pred)
            if len(cols) != self.m:
                raise DatasetError(f"y_pred has {len(cols)} outputs, y_obs has {self.m}")
            for j, c in enumerate(cols):
                if len(c) != n:
                    raise DatasetError(f"y_pred[{j}] has {len(c)} entries, expected {n}")
            object.__setattr__(self, "y_pred", cols)
        if (self.latent_mu is None) != (self.latent_sigma is None):
            raise DatasetError("latent_mu and latent_sigma must be given together")
        if self.latent_mu is not None:
            mu = np.asarray(self.latent_mu, dtype=float)
            sigma = np.asarray(self.latent_sigma, dtype=float)
            if mu.shape != sigma.shape or mu.ndim != 3 or mu.shape[0] != n:
                raise DatasetError("latent arrays must both have shape (n, E, k + l)")
            if mu.shape[2] != self.k + self.l:
                raise DatasetError(f"latents have {mu.shape[2]} dims, expected k + l = {self.k + self.l}")
            if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma)) and np.all(sigma > 0)):
                raise DatasetError("latent statistics must be finite with sigma > 0")
            mu.setflags(write=False)
            sigma.setflags(write=False)
            object.__setattr__(self, "latent_mu", mu)
            object.__setattr__(self, "latent_sigma", sigma)

    # dimensions -----------------------------------------------------------
    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def k(self) -> int:
        return self.v_content.shape[1]

    @property
    def l(self) -> int:
        return self.v_style.shape[1]

    @property
    def m(self) -> int:
        return self.y_obs.shape[1]

    @property
    def E(self) -> int:
        return 0 if self.latent_mu is None else self.latent_mu.shape[1]

    @property
    def has_predictions(self) -> bool:
        return self.y_pred is not None

    # views ----------------------------------------------------------------
    def semantic_features(self) -> np.ndarray:
        """Content then style features, shape ``(n, k + l)``; NaN = unlabeled."""
        return np.hstack([self.v_content, self.v_style])

    def prediction_means(self, output: int) -> np.ndarray:
        if self.y_pred is None:
            raise DatasetError("dataset carries no predictions")
        col = self.y_pred[output]
        if isinstance(col, NormalArray):
            return np.array(col.mu)
        return np.array([d.mean for d in col])

    def subset(self, indices) -> "CertDataset":
        idx = np.asarray(indices)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(int)
        return CertDataset(
            ids=tuple(self.ids[i] for i in idx),
            v_content=self.v_content[idx],
            v_style=self.v_style[idx],
            y_obs=self.y_obs[idx],
            y_pred=None if self.y_pred is None else tuple(_take(c, idx) for c in self.y_pred),
            latent_mu=None if self.latent_mu is None else self.latent_mu[idx],
            latent_sigma=None if self.latent_sigma is None else self.latent_sigma[idx],
            metadata=dict(self.metadata),
        )

    def with_predictions(self, y_pred: Sequence[Sequence[PredictiveDistribution]]) -> "CertDataset":
        return CertDataset(
            ids=self.ids,
            v_content=self.v_content,
            v_style=self.v_style,
            y_obs=self.y_obs,
            y_pred=tuple(y_pred),
            latent_mu=self.latent_mu,
            latent_sigma=self.latent_sigma,
            metadata=dict(self.metadata),
        )

    def without_predictions(self) -> "CertDataset":
        return CertDataset(self.ids, self.v_content, self.v_style, self.y_obs, None,
                           self.latent_mu, self.latent_sigma, dict(self.metadata))

    def record(self, i: int) -> CertRecord:
        style = tuple(None if math.isnan(v) else float(v) for v in self.v_style[i])
        y_pred = None
        if self.y_pred is not None:
            y_pred = tuple(col[i] for col in self.y_pred)
        latents = None
        if self.latent_mu is not None:
            latents = tuple(
                tuple(LatentGaussian(float(mu), float(sig)) for mu, sig in zip(mus, sigs))
                for mus, sigs in zip(self.latent_mu[i], self.latent_sigma[i])
            )
        return CertRecord(
            id=self.ids[i],
            v_content=tuple(float(v) for v in self.v_content[i]),
            v_style=style,
            y_obs=tuple(float(v) for v in self.y_obs[i]),
            y_pred=y_pred,
            latents=latents,
        )

    def records(self) -> Iterator[CertRecord]:
        for i in range(self.n):
            yield self.record(i)

    @classmethod
    def from_records(cls, records: Iterable[CertRecord], metadata: Optional[dict] = None) -> "CertDataset":
        records = list(records)
        if not records:
            raise DatasetError("cannot build a dataset from zero records")
        has_pred = records[0].y_pred is not None
        has_lat = records[0].latents is not None
        if any((r.y_pred is not None) != has_pred or (r.latents is not None) != has_lat for r in records):
            raise DatasetError("y_pred / latents must be present on all records or none")
        style = [[np.nan if v is None else v for v in r.v_style] for r in records]
        y_pred = None
        if has_pred:
            m = len(records[0].y_obs)
            y_pred = tuple([r.y_pred[j] for r in records] for j in range(m))
        mu = sigma = None
        if has_lat:
            mu = np.array([[[g.mu for g in member] for member in r.latents] for r in records], dtype=float)
            sigma = np.array([[[g.sigma for g in member] for member in r.latents] for r in records], dtype=float)
        n = len(records)
        return cls(
            ids=tuple(r.id for r in records),
            v_content=np.array([r.v_content for r in records], dtype=float).reshape(n, -1),
            v_style=np.array(style, dtype=float).reshape(n, -1),
            y_obs=np.array([r.y_obs for r in records], dtype=float).reshape(n, -1),
            y_pred=y_pred,
            latent_mu=mu,
            latent_sigma=sigma,
            metadata=dict(metadata or {}),
        )


# --------------------------------------------------------------------------
# JSON Lines
# --------------------------------------------------------------------------

def record_to_dict(record: CertRecord) -> dict:
    out = {
        "id": record.id,
        "v_content": list(record.v_content),
        "v_style": list(record.v_style),
        "y_obs": list(record.y_obs),
    }
    if record.y_pred is not None:
        out["y_pred"] = [distribution_to_dict(d) for d in record.y_pred]
    if record.latents is not None:
        out["latents"] = [[{"mu": g.mu, "sigma": g.sigma} for g in member] for member in record.latents]
    return out


def dumps_record(record: CertRecord) -> str:
    return json.dumps(record_to_dict(record), separators=(",", ":"), allow_nan=False)


def _real(value, where: str, line: int) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DatasetError(f"{where} must be a number (line {line})")
    value = float(value)
    if not math.isfinite(value):
        raise DatasetError(f"{where} must be finite (line {line})")
    return value


def _vector(obj: dict, key: str, line: int, allow_null: bool = False) -> list:
    value = obj.get(key)
    if not isinstance(value, list):
        raise DatasetError(f"{key} must be a list (line {line})")
    out = []
    for i, v in enumerate(value):
        if v is None and allow_null:
            out.append(None)
        else:
            out.append(_real(v, f"{key}[{i}]", line))
    return out


def _check_dim(name: str, got: int, expected: Optional[int], line: int) -> None:
    if expected is not None and got != expected:
        raise DatasetError(f"dimension mismatch: {name} has length {got}, expected {expected} (line {line})")


def parse_record(text: str, line: int = 1, schema: DatasetSchema = DatasetSchema()) -> CertRecord:
    """Parse and validate one JSON line against ``schema``."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON: {exc.msg} (line {line})") from None
    if not isinstance(obj, dict):
        raise DatasetError(f"record must be a JSON object (line {line})")
    if not isinstance(obj.get("id"), (str, int)) or isinstance(obj.get("id"), bool):
        raise DatasetError(f"id must be a string (line {line})")
    v_content = _vector(obj, "v_content", line)
    if obj.get("v_style") is None:
        v_style = [None] * (schema.l or 0)
    else:
        v_style = _vector(obj, "v_style", line, allow_null=True)
    y_obs = _vector(obj, "y_obs", line)
    _check_dim("v_content", len(v_content), schema.k, line)
    _check_dim("v_style", len(v_style), schema.l, line)
    _check_dim("y_obs", len(y_obs), schema.m, line)

    y_pred = None
    if obj.get("y_pred") is not None:
        raw = obj["y_pred"]
        if not isinstance(raw, list):
            raise DatasetError(f"y_pred must be a list (line {line})")
        if len(raw) != len(y_obs):
            raise DatasetError(
                f"dimension mismatch: y_pred has length {len(raw)}, y_obs has {len(y_obs)} (line {line})"
            )
        y_pred = []
        for j, d in enumerate(raw):
            try:
                y_pred.append(distribution_from_dict(d))
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise DatasetError(f"y_pred[{j}]: {exc} (line {line})") from None
        y_pred = tuple(y_pred)

    latents = None
    if obj.get("latents") is not None:
        raw = obj["latents"]
        if not isinstance(raw, list) or not all(isinstance(m, list) for m in raw):
            raise DatasetError(f"latents must be a list of per-member lists (line {line})")
        _check_dim("latents (ensemble members)", len(raw), schema.E, line)
        width = len(v_content) + len(v_style)
        members = []
        for e, member in enumerate(raw):
            _check_dim(f"latents[{e}]", len(member), width, line)
            gaussians = []
            for j, g in enumerate(member):
                if not isinstance(g, dict):
                    raise DatasetError(f"latents[{e}][{j}] must be an object (line {line})")
                mu = _real(g.get("mu"), f"latents[{e}][{j}].mu", line)
                sigma = _real(g.get("sigma"), f"latents[{e}][{j}].sigma", line)
                if not sigma > 0:
                    raise DatasetError(f"latents[{e}][{j}].sigma must be > 0 (line {line})")
                gaussians.append(LatentGaussian(mu, sigma))
            members.append(tuple(gaussians))
        latents = tuple(members)
    elif schema.E:
        raise DatasetError(f"latents missing, expected {schema.E} ensemble members (line {line})")

    return CertRecord(
        id=str(obj["id"]),
        v_content=tuple(v_content),
        v_style=tuple(v_style),
        y_obs=tuple(y_obs),
        y_pred=y_pred,
        latents=latents,
    )


def load_dataset(path, schema: DatasetSchema = DatasetSchema()) -> CertDataset:
    """Read a JSON Lines evaluation set.

    Dimensions not fixed by ``schema`` are taken from the first record and
    enforced on all later ones.  Errors name the offending line.
    """
    path = Path(path)
    records: list[CertRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            rec = parse_record(text, line_no, schema)
            if not records:
                schema = DatasetSchema(
                    k=len(rec.v_content),
                    l=len(rec.v_style),
                    m=len(rec.y_obs),
                    E=None if rec.latents is None else len(rec.latents),
                )
            else:
                first = records[0]
                if (rec.y_pred is None) != (first.y_pred is None):
                    raise DatasetError(f"y_pred present on some records only (line {line_no})")
                if (rec.latents is None) != (first.latents is None):
                    raise DatasetError(f"latents present on some records only (line {line_no})")
            records.append(rec)
    if not records:
        raise DatasetError(f"{path}: no records")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        seen: set[str] = set()
        for line_no, rid in enumerate(ids, start=1):
            if rid in seen:
                raise DatasetError(f"duplicate id {rid!r} (record {line_no})")
            seen.add(rid)
    return CertDataset.from_records(records, metadata={"source": str(path)})


def write_dataset(dataset: CertDataset, path) -> None:
    """Write ``dataset`` in canonical JSON Lines form (UTF-8, ``\\n`` endings)."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for record in dataset.records():
            fh.write(dumps_record(record))
            fh.write("\n")
