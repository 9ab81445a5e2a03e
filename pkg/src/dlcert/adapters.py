"""Model adapters: how an external (re)trainable model takes part in the
holdout tests.

Three flavours share one method, :meth:`ModelAdapter.train_eval`:

* :class:`PrecomputedAdapter` returns predictions already stored in the data;
* :class:`SubprocessAdapter` drives an executable through the
  ``train`` / ``predict`` command protocol;
* :class:`FunctionAdapter` wraps two in-process callables (used by the
  bundled stubs and the test-suite).
"""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from .datamodel import CertDataset, write_dataset
from .statdist import NormalArray, PredictiveDistribution, distribution_from_dict

__all__ = [
    "AdapterError",
    "ModelAdapter",
    "PrecomputedAdapter",
    "SubprocessAdapter",
    "FunctionAdapter",
    "adapter_train_eval",
    "eval_model_performance",
    "scratch_root",
]

SCRATCH_ENV = "DLCERT_SCRATCH"


class AdapterError(RuntimeError):
    """An external model failed to train or predict."""

    def __init__(self, message: str, stderr: str = ""):
        super().__init__(message if not stderr else f"{message}\n--- stderr ---\n{stderr}")
        self.stderr = stderr


def scratch_root() -> Optional[str]:
    """Scratch directory override taken from ``$DLCERT_SCRATCH``."""
    return os.environ.get(SCRATCH_ENV) or None


class ModelAdapter:
    """Trains on one dataset and fills ``y_pred`` on another."""

    def train_eval(self, train: CertDataset, eval: CertDataset) -> CertDataset:
        raise NotImplementedError


class PrecomputedAdapter(ModelAdapter):
    """Predictions were produced offline and live in the dataset itself."""

    def train_eval(self, train: CertDataset, eval: CertDataset) -> CertDataset:
        if not eval.has_predictions:
            raise AdapterError("precomputed adapter: evaluation records carry no y_pred")
        return eval

    def __repr__(self) -> str:
        return "PrecomputedAdapter()"


class SubprocessAdapter(ModelAdapter):
    """Runs ``<command> train ...`` then ``<command> predict ...``.

    ``command`` is either an argv list or a shell-style string which is split
    with :func:`shlex.split`; it is never passed through a shell.
    """

    def __init__(self, command: Union[str, Sequence[str]], workdir=None, timeout: float = 600.0):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not argv:
            raise ValueError("subprocess adapter needs a non-empty command")
        if not timeout > 0:
            raise ValueError("timeout must be > 0")
        self.command = argv
        self.workdir = None if workdir is None else str(workdir)
        self.timeout = float(timeout)

    def __repr__(self) -> str:
        return f"SubprocessAdapter({self.command!r}, timeout={self.timeout})"

    def _run(self, args: list[str], stage: str) -> None:
        try:
            proc = subprocess.run(
                self.command + args,
                cwd=self.workdir,
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except subprocess.TimeoutExpired as exc:
            stderr = exc.stderr.decode() if isinstance(exc.stderr, bytes) else (exc.stderr or "")
            raise AdapterError(f"{stage} timed out after {self.timeout:g} s", stderr) from None
        except OSError as exc:
            raise AdapterError(f"{stage} could not start: {exc}") from None
        if proc.returncode != 0:
            raise AdapterError(f"{stage} exited with status {proc.returncode}", proc.stderr)

    def train_eval(self, train: CertDataset, eval: CertDataset) -> CertDataset:
        with tempfile.TemporaryDirectory(prefix="dlcert-", dir=scratch_root()) as tmp:
            tmp = Path(tmp)
            train_path, eval_path = tmp / "train.jsonl", tmp / "eval.jsonl"
            model_dir, preds_path = tmp / "model", tmp / "preds.jsonl"
            model_dir.mkdir()
            write_dataset(train.without_predictions(), train_path)
            write_dataset(eval.without_predictions(), eval_path)
            self._run(["train", "--data", str(train_path), "--out", str(model_dir)], "train")
            self._run(
                ["predict", "--model", str(model_dir), "--data", str(eval_path), "--out", str(preds_path)],
                "predict",
            )
            if not preds_path.exists():
                raise AdapterError(f"predict wrote no file at {preds_path}")
            predictions = read_predictions(preds_path)
        return merge_predictions(eval, predictions)


class FunctionAdapter(ModelAdapter):
    """In-process adapter from ``fit(train) -> model`` and
    ``predict(model, eval) -> per-output prediction columns``."""

    def __init__(self, fit: Callable[[CertDataset], Any],
                 predict: Callable[[Any, CertDataset], Sequence[Sequence[PredictiveDistribution]]],
                 name: str = "function"):
        self.fit = fit
        self.predict = predict
        self.name = name

    def __repr__(self) -> str:
        return f"FunctionAdapter({self.name!r})"

    def train_eval(self, train: CertDataset, eval: CertDataset) -> CertDataset:
        model = self.fit(train.without_predictions())
        return eval.with_predictions(self.predict(model, eval.without_predictions()))


def read_predictions(path) -> dict[str, list[PredictiveDistribution]]:
    out: dict[str, list[PredictiveDistribution]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
                out[str(obj["id"])] = [distribution_from_dict(d) for d in obj["y_pred"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise AdapterError(f"bad prediction line {line_no}: {exc}") from None
    return out


def write_predictions(path, ids: Sequence[str], columns: Sequence[Sequence[PredictiveDistribution]]) -> None:
    """Write ``{id, y_pred}`` lines; ``columns`` is indexed ``[output][record]``."""
    from .statdist import distribution_to_dict

    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for i, rid in enumerate(ids):
            y_pred = [distribution_to_dict(col[i]) for col in columns]
            fh.write(json.dumps({"id": rid, "y_pred": y_pred}, separators=(",", ":")) + "\n")


def merge_predictions(eval: CertDataset, predictions: dict[str, list[PredictiveDistribution]]) -> CertDataset:
    missing = [rid for rid in eval.ids if rid not in predictions]
    if missing:
        raise AdapterError(f"predictions missing for ids: {', '.join(missing)}")
    for rid in eval.ids:
        if len(predictions[rid]) != eval.m:
            raise AdapterError(f"record {rid}: {len(predictions[rid])} predictions for {eval.m} outputs")
    columns = [[predictions[rid][j] for rid in eval.ids] for j in range(eval.m)]
    return eval.with_predictions(columns)


def adapter_train_eval(adapter: ModelAdapter, train: CertDataset, eval: CertDataset) -> CertDataset:
    """Train ``adapter`` on ``train`` and return ``eval`` with ``y_pred`` filled."""
    return adapter.train_eval(train, eval)


def eval_model_performance(preds: Sequence[PredictiveDistribution], obs) -> float:
    """Negative mean squared error of the predictive means (larger is better)."""
    obs = np.asarray(obs, dtype=float).ravel()
    if len(preds) != obs.size:
        raise ValueError(f"{len(preds)} predictions for {obs.size} observations")
    if obs.size == 0:
        raise ValueError("cannot score an empty evaluation set")
    means = preds.mu if isinstance(preds, NormalArray) else np.array([d.mean for d in preds])
    return -float(np.mean((means - obs) ** 2))
