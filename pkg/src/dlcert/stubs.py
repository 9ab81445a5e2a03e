"""Small reference models speaking the adapter protocol.

They read only the semantic features of each record, which is enough to
exercise every holdout test without an external model::

    python -m dlcert.stubs linear train --data train.jsonl --out model/
    python -m dlcert.stubs linear predict --model model/ --data eval.jsonl --out preds.jsonl
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .adapters import FunctionAdapter, SubprocessAdapter, write_predictions
from .datamodel import CertDataset, load_dataset
from .statdist import NormalArray

STUBS = ("mean", "linear", "nearest", "monotone", "saturating", "constant")


def fit(name: str, train: CertDataset) -> dict:
    """Return a JSON-serialisable model state."""
    if name == "mean":
        return {"mean": train.y_obs.mean(axis=0).tolist()}
    if name == "linear":
        X = np.column_stack([train.v_content, np.ones(train.n)])
        coef, *_ = np.linalg.lstsq(X, train.y_obs, rcond=None)
        resid = train.y_obs - X @ coef
        sd = np.maximum(resid.std(axis=0), 1e-9)
        return {"coef": coef.tolist(), "sd": sd.tolist()}
    if name == "nearest":
        return {"v": train.v_content.tolist(), "y": train.y_obs.tolist()}
    if name == "saturating":
        lo, hi = np.quantile(train.v_content, [0.05, 0.95], axis=0)
        return {"lo": lo.tolist(), "hi": hi.tolist()}
    if name in ("monotone", "constant"):
        return {}
    raise ValueError(f"unknown stub {name!r}; choose from {', '.join(STUBS)}")


def predict(name: str, state: dict, data: CertDataset) -> list[NormalArray]:
    """Per-output prediction columns for ``data``."""
    n, m = data.n, data.m
    sd = np.ones(m)
    if name == "mean":
        means = np.tile(state["mean"], (n, 1))
    elif name == "linear":
        X = np.column_stack([data.v_content, np.ones(n)])
        means = X @ np.asarray(state["coef"])
        sd = np.asarray(state["sd"])
    elif name == "nearest":
        v, y = np.asarray(state["v"]), np.asarray(state["y"])
        d2 = ((data.v_content[:, None, :] - v[None, :, :]) ** 2).sum(axis=2)
        means = y[np.argmin(d2, axis=1)]
    elif name == "monotone":
        means = data.v_content[:, :m]
    elif name == "saturating":
        means = np.clip(data.v_content, state["lo"], state["hi"])[:, :m]
    elif name == "constant":
        means = np.zeros((n, m))
    else:
        raise ValueError(f"unknown stub {name!r}")
    return [NormalArray(means[:, j], sd[j]) for j in range(m)]


def function_adapter(name: str) -> FunctionAdapter:
    """In-process adapter for stub ``name``."""
    if name not in STUBS:
        raise ValueError(f"unknown stub {name!r}")
    return FunctionAdapter(lambda train: fit(name, train), lambda state, data: predict(name, state, data), name)


def subprocess_adapter(name: str, timeout: float = 120.0) -> SubprocessAdapter:
    """Adapter running stub ``name`` in a fresh interpreter."""
    return SubprocessAdapter([sys.executable, "-m", "dlcert.stubs", name], timeout=timeout)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m dlcert.stubs")
    parser.add_argument("stub", choices=STUBS)
    sub = parser.add_subparsers(dest="stage", required=True)
    p_train = sub.add_parser("train")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_pred = sub.add_parser("predict")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--data", required=True)
    p_pred.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    data = load_dataset(args.data)
    if args.stage == "train":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "model.json").write_text(json.dumps(fit(args.stub, data)))
    else:
        state = json.loads((Path(args.model) / "model.json").read_text())
        write_predictions(args.out, data.ids, predict(args.stub, state, data))
    return 0


if __name__ == "__main__":
    sys.exit(main())
