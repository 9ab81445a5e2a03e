"""Command-line entry point.

``certify`` runs the enabled suites on a dataset and writes ``report.json``
and ``report.md``; ``simstudy`` writes the false-failure table;
``report-plots`` turns a report into CSV files; ``gen`` emits synthetic
datasets.  Exit status: 0 when every enabled suite passed, 1 when at least
one failed, 2 on configuration, data or adapter errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .adapters import AdapterError, ModelAdapter, SubprocessAdapter
from .calibration import certify_uncertainty_quantification
from .datamodel import DatasetError, OperatingRange, load_dataset, write_dataset
from .generalization import (
    ensemble_disagreement_report,
    test_new_feature_combinations,
    test_no_feature_collapse,
)
from .headens import HeadConfig, run_head_batch
from .linmodel import test_1_to_1_mapping, test_content_style_separation
from .lipschitz import Composition, bilipschitz_bounds, layer_from_dict
from .simstudy import (
    compute_failure_table,
    gen_conditional_failure,
    gen_perfect_calibration,
    gen_time_varying_forecast,
    gen_toy_latents,
    recommend_sample_size,
)
from .stubs import STUBS, function_adapter

REPORT_VERSION = 1
SUITES = ("calibration", "disentanglement", "generalization", "ood", "lipschitz", "simstudy")
EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "calibration": {"eps": 0.10, "n_min": 10_000, "p_fail": 0.01, "thresh": 0.001, "pairwise": False,
                    "histogram_bins": 10},
    "disentanglement": {"significance_level": 0.05},
    "generalization": {"delta": 0.2, "n_repeat": 20, "margin": 0.1, "train_fraction": 0.80,
                       "content_index": 0, "output_index": None},
    "ood": {"tau_ood": 0.15, "tau_variance": 0.1, "expected_fp_rate": 0.05, "expected_fn_rate": 0.05,
            "ood_ids": [], "easy_ids": [], "flip": None},
    "lipschitz": {"layers": [], "min_lower": 0.0},
    "simstudy": {"n_grid": [10, 100, 1_000, 10_000, 100_000], "eps_grid": [0.05, 0.10, 0.20],
                 "n_trials": 100, "eps": 0.10, "max_failure": 0.01},
}


@dataclass
class RunConfig:
    """Validated run configuration; unset values fall back to ``DEFAULTS``."""

    dataset: Optional[Path] = None
    train_dataset: Optional[Path] = None
    operating_range: Optional[OperatingRange] = None
    adapter: Optional[dict] = None
    suites: dict[str, bool] = field(default_factory=lambda: {"calibration": True})
    params: dict[str, dict[str, Any]] = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULTS.items()})
    seed: int = 0
    out: Path = Path("dlcert-out")

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path(".")) -> "RunConfig":
        cfg = cls()
        unknown = set(raw) - {"data", "adapter", "suites", "seed", "out", *DEFAULTS}
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
        data = raw.get("data", {})
        if "path" in data:
            cfg.dataset = _existing(base_dir, data["path"], "data.path")
        if "train_path" in data:
            cfg.train_dataset = _existing(base_dir, data["train_path"], "data.train_path")
        if "operating_range" in data:
            try:
                cfg.operating_range = OperatingRange.from_pairs(data["operating_range"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"data.operating_range: {exc}") from None
        if "adapter" in raw:
            cfg.adapter = dict(raw["adapter"])
            _check_adapter(cfg.adapter)
        if "suites" in raw:
            bad = set(raw["suites"]) - set(SUITES)
            if bad:
                raise ConfigError(f"unknown suites: {', '.join(sorted(bad))}")
            cfg.suites = {k: bool(v) for k, v in raw["suites"].items()}
        for section, defaults in DEFAULTS.items():
            given = raw.get(section, {})
            bad = set(given) - set(defaults)
            if bad:
                raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(bad))}")
            cfg.params[section].update(given)
        cfg.seed = int(raw.get("seed", 0))
        if "out" in raw:
            cfg.out = base_dir / raw["out"]
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw, path.parent)

    def enabled(self, suite: str) -> bool:
        return bool(self.suites.get(suite, False))

    def validate(self) -> None:
        c, g, o = self.params["calibration"], self.params["generalization"], self.params["ood"]
        checks = [
            (0 <= c["eps"] < 1, "calibration.eps must lie in [0, 1)"),
            (int(c["n_min"]) >= 1, "calibration.n_min must be >= 1"),
            (0 < c["p_fail"] < 1, "calibration.p_fail must lie in (0, 1)"),
            (0 < c["thresh"] < 1, "calibration.thresh must lie in (0, 1)"),
            (0 < self.params["disentanglement"]["significance_level"] < 1,
             "disentanglement.significance_level must lie in (0, 1)"),
            (g["delta"] > 0, "generalization.delta must be positive"),
            (int(g["n_repeat"]) >= 0, "generalization.n_repeat must be >= 0"),
            (0 <= g["margin"] < 1, "generalization.margin must lie in [0, 1)"),
            (0 < g["train_fraction"] < 1, "generalization.train_fraction must lie in (0, 1)"),
            (0 < o["tau_ood"] < 1, "ood.tau_ood must lie in (0, 1)"),
            (o["tau_variance"] > 0, "ood.tau_variance must be positive"),
            (int(self.params["simstudy"]["n_trials"]) >= 1, "simstudy.n_trials must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        needs_data = [s for s in SUITES if self.enabled(s) and s not in ("lipschitz", "simstudy")]
        if needs_data and self.dataset is None:
            raise ConfigError(f"suites {', '.join(needs_data)} need data.path")
        if self.enabled("generalization") and self.adapter is None:
            raise ConfigError("the generalization suite needs an [adapter] section")
        if self.enabled("ood") and self.operating_range is None:
            raise ConfigError("the ood suite needs data.operating_range")

    def to_dict(self) -> dict:
        return {
            "dataset": None if self.dataset is None else self.dataset.name,
            "train_dataset": None if self.train_dataset is None else self.train_dataset.name,
            "operating_range": None if self.operating_range is None
            else [list(self.operating_range[i]) for i in range(len(self.operating_range))],
            "adapter": self.adapter,
            "suites": {s: self.enabled(s) for s in SUITES},
            "params": {s: self.params[s] for s in SUITES if self.enabled(s)},
            "seed": self.seed,
        }


def _existing(base: Path, value, key: str) -> Path:
    path = Path(value)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ConfigError(f"{key}: no such file {path}")
    return path


def _check_adapter(spec: dict) -> None:
    kind = spec.get("kind")
    if kind == "stub":
        if spec.get("name") not in STUBS:
            raise ConfigError(f"adapter.name must be one of {', '.join(STUBS)}")
    elif kind == "subprocess":
        if not spec.get("command"):
            raise ConfigError("adapter.command is required for subprocess adapters")
    else:
        raise ConfigError("adapter.kind must be 'stub' or 'subprocess'")


def make_adapter(spec: dict) -> ModelAdapter:
    if spec["kind"] == "stub":
        return function_adapter(spec["name"])
    return SubprocessAdapter(spec["command"], spec.get("workdir"), float(spec.get("timeout", 600.0)))


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------

def _suite_calibration(cfg: RunConfig, data) -> dict:
    p = cfg.params["calibration"]
    if data.y_pred is None:
        if cfg.adapter is None or cfg.train_dataset is None:
            raise ConfigError("calibration needs predictions in the dataset or an adapter with data.train_path")
        data = make_adapter(cfg.adapter).train_eval(load_dataset(cfg.train_dataset), data)
    section = certify_uncertainty_quantification(
        data, p["eps"], int(p["n_min"]), p["p_fail"], p["thresh"], bool(p["pairwise"]), int(p["histogram_bins"]))
    section["passed"] = section["certified"]
    return section


def _suite_disentanglement(cfg: RunConfig, data) -> dict:
    if data.latent_mu is None:
        raise ConfigError("disentanglement needs latents in the dataset")
    sig = cfg.params["disentanglement"]["significance_level"]
    z = data.latent_mu.mean(axis=1)
    one = test_1_to_1_mapping(z, data.v_content, sig)
    sep = test_content_style_separation(z[:, :data.k], z[:, data.k:], data.v_style, sig)
    return {
        "passed": bool(one.passed and (sep.passed or sep.skipped)),
        "one_to_one": one.to_dict(),
        "content_style_separation": sep.to_dict(),
    }


def _suite_generalization(cfg: RunConfig, data) -> dict:
    p = cfg.params["generalization"]
    adapter = make_adapter(cfg.adapter)
    seeds = np.random.SeedSequence(cfg.seed).spawn(1)
    combos = test_new_feature_combinations(
        data.without_predictions(), adapter, p["delta"], int(p["n_repeat"]), p["margin"],
        p["train_fraction"], seeds[0])
    collapse = test_no_feature_collapse(data.without_predictions(), adapter, int(p["content_index"]),
                                        p["output_index"])
    return {
        "passed": bool(combos.passed and collapse.passed),
        "new_feature_combinations": combos.to_dict(),
        "no_feature_collapse": collapse.to_dict(),
    }


def _suite_ood(cfg: RunConfig, data) -> dict:
    p = cfg.params["ood"]
    if data.latent_mu is None or data.E < 2:
        raise ConfigError("the ood suite needs latents from at least two ensemble members")
    head = HeadConfig(cfg.operating_range, p["flip"])
    scratch = cfg.out / "head_outputs.jsonl"
    run_head_batch(data, head, scratch, p["tau_ood"])
    ood_ids = {str(i) for i in p["ood_ids"]}
    flagged = []
    with scratch.open(encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            flagged.append(bool(rec["ood"]))
    flagged = np.array(flagged)
    labelled = np.array([rid in ood_ids for rid in data.ids])
    in_dist = ~labelled
    fp_rate = float(flagged[in_dist].mean()) if in_dist.any() else 0.0
    section = {
        "head_outputs": scratch.name,
        "mixture_rule": {
            "tau_ood": p["tau_ood"],
            "n_in_distribution": int(in_dist.sum()),
            "rejected_in_distribution": int(flagged[in_dist].sum()),
            "rejection_rate": fp_rate,
            "expected_fp_rate": p["expected_fp_rate"],
        },
    }
    ok = fp_rate <= p["expected_fp_rate"]
    if labelled.any():
        miss_rate = float(1.0 - flagged[labelled].mean())
        section["mixture_rule"].update({"n_ood": int(labelled.sum()), "miss_rate": miss_rate,
                                        "expected_fn_rate": p["expected_fn_rate"]})
        ok = ok and miss_rate <= p["expected_fn_rate"]
    index = {rid: i for i, rid in enumerate(data.ids)}
    section["disagreement"] = ensemble_disagreement_report(
        data, p["tau_variance"], p["expected_fp_rate"], p["expected_fn_rate"],
        ood_subset=[index[r] for r in p["ood_ids"] if r in index],
        easy_subset=[index[r] for r in p["easy_ids"] if r in index] or None)
    section["passed"] = bool(ok)
    return section


def _suite_lipschitz(cfg: RunConfig, data) -> dict:
    p = cfg.params["lipschitz"]
    if not p["layers"]:
        raise ConfigError("the lipschitz suite needs lipschitz.layers")
    try:
        layers = [layer_from_dict(dict(obj)) for obj in p["layers"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"lipschitz.layers: {exc}") from None
    per_layer = [list(bilipschitz_bounds(layer)) for layer in layers]
    lower, upper = bilipschitz_bounds(Composition(layers))
    return {
        "passed": bool(lower > 0 and lower >= p["min_lower"]),
        "lower": lower,
        "upper": upper,
        "per_layer": per_layer,
        "min_lower": p["min_lower"],
    }


def _suite_simstudy(cfg: RunConfig, data) -> dict:
    p = cfg.params["simstudy"]
    table = compute_failure_table(tuple(int(n) for n in p["n_grid"]), tuple(float(e) for e in p["eps_grid"]),
                                  int(p["n_trials"]), cfg.seed)
    rec = recommend_sample_size(table, float(p["eps"]), float(p["max_failure"]))
    return {"passed": rec is not None, "table": table.to_dict(), "recommended_n": rec,
            "eps": p["eps"], "max_failure": p["max_failure"]}


_RUNNERS = {
    "calibration": _suite_calibration,
    "disentanglement": _suite_disentanglement,
    "generalization": _suite_generalization,
    "ood": _suite_ood,
    "lipschitz": _suite_lipschitz,
    "simstudy": _suite_simstudy,
}


def run_certify(cfg: RunConfig) -> tuple[dict, int]:
    """Run the enabled suites in a fixed order and assemble the report."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg.dataset) if cfg.dataset is not None else None
    suites = {}
    for name in SUITES:
        if cfg.enabled(name):
            suites[name] = _RUNNERS[name](cfg, data)
    certified = all(s["passed"] for s in suites.values())
    report = {
        "report_version": REPORT_VERSION,
        "certified": certified,
        "config": cfg.to_dict(),
        "suites": suites,
        "metadata": {"created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                     "dlcert_version": __version__},
    }
    return report, EXIT_OK if certified else EXIT_FAIL


def deterministic_view(report: dict) -> dict:
    """The report without its ``metadata`` field."""
    return {k: v for k, v in report.items() if k != "metadata"}


def write_report(report: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=True) + "\n",
                                     encoding="utf-8")
    (out / "report.md").write_text(render_markdown(report), encoding="utf-8")


def render_markdown(report: dict) -> str:
    """Human-readable mirror of the JSON report."""
    lines = ["# Certification report", ""]
    lines.append(f"**Overall: {'CERTIFIED' if report['certified'] else 'NOT CERTIFIED'}**")
    lines.append("")
    for name, suite in report["suites"].items():
        lines.append(f"## {name}: {'pass' if suite['passed'] else 'FAIL'}")
        lines.append("")
        _md_block(suite, lines, level=0)
        lines.append("")
    lines.append("## configuration")
    lines.append("")
    _md_block(report["config"], lines, level=0)
    lines.append("")
    lines.append("## metadata")
    lines.append("")
    _md_block(report["metadata"], lines, level=0)
    return "\n".join(lines) + "\n"


def _md_block(obj, lines: list[str], level: int) -> None:
    pad = "  " * level
    for key, value in obj.items():
        if isinstance(value, dict):
            lines.append(f"{pad}- {key}:")
            _md_block(value, lines, level + 1)
        elif isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
            lines.append(f"{pad}- {key}: {len(value)} entries")
            for i, v in enumerate(value):
                lines.append(f"{pad}  - [{i}]")
                _md_block(v, lines, level + 2)
        else:
            lines.append(f"{pad}- {key}: {json.dumps(value)}")


# --------------------------------------------------------------------------
# report-plots
# --------------------------------------------------------------------------

def report_plots(report_path, out: Path) -> list[str]:
    """Write one CSV per figure-like artefact and a manifest; returns names.

    * ``calibration_curve_<j>.csv``: p, observed_frequency
    * ``pit_histogram_<j>.csv``: bin_lo, bin_hi, count
    * ``failure_table.csv``: eps then one column per sample size
    * ``loss_trace.csv``: epoch, loss
    """
    report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    if report.get("report_version") != REPORT_VERSION:
        raise ConfigError(f"unsupported report version {report.get('report_version')!r}")
    out.mkdir(parents=True, exist_ok=True)
    files: list[dict] = []

    def emit(name: str, header: Sequence[str], rows, description: str) -> None:
        with (out / name).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        files.append({"file": name, "columns": list(header), "description": description})

    cal = report.get("suites", {}).get("calibration")
    for m in (cal or {}).get("marginal", []):
        j = m["output"]
        emit(f"calibration_curve_{j}.csv", ["p", "observed_frequency"],
             zip(m["curve"]["p"], m["curve"]["observed_frequency"]), f"calibration curve, output {j}")
        h = m["pit_histogram"]
        emit(f"pit_histogram_{j}.csv", ["bin_lo", "bin_hi", "count"],
             zip(h["bin_lo"], h["bin_hi"], h["count"]), f"PIT histogram, output {j}")
    sim = report.get("suites", {}).get("simstudy")
    if sim:
        t = sim["table"]
        emit("failure_table.csv", ["eps"] + [str(n) for n in t["n_grid"]],
             ([e] + row for e, row in zip(t["eps_grid"], t["frequencies"])), "false-failure frequencies")
    trace = report.get("loss_trace")
    if trace:
        emit("loss_trace.csv", ["epoch", "loss"], enumerate(trace), "training loss per epoch")
    (out / "manifest.json").write_text(json.dumps({"report_version": REPORT_VERSION, "files": files},
                                                  indent=2) + "\n", encoding="utf-8")
    return [f["file"] for f in files]


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------

GENERATORS = {
    "perfect": lambda n, seed: gen_perfect_calibration(n, seed),
    "conditional-failure": lambda n, seed: gen_conditional_failure(n, seed),
    "time-varying": lambda n, seed: gen_time_varying_forecast(n, seed),
    "toy-latents": lambda n, seed: gen_toy_latents(n, seed),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlcert", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required: bool) -> None:
        p.add_argument("--config", required=config_required, help="TOML run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")

    common(sub.add_parser("certify", help="run the enabled test suites"), True)
    p = sub.add_parser("simstudy", help="false-failure table and sample-size recommendation")
    common(p, False)
    p.add_argument("--n-trials", type=int, help="trials per cell (overrides the config)")
    p = sub.add_parser("report-plots", help="CSV data behind the report figures")
    p.add_argument("report", help="report.json written by certify")
    p.add_argument("--out", required=True)
    p = sub.add_parser("gen", help="write a synthetic dataset as JSONL")
    p.add_argument("scenario", choices=sorted(GENERATORS))
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output JSONL path")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig(suites={})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = Path(args.out)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "certify":
            cfg = _load_config(args)
            report, code = run_certify(cfg)
            write_report(report, cfg.out)
            print(f"{'certified' if code == EXIT_OK else 'not certified'}: {cfg.out / 'report.json'}")
            return code
        if args.command == "simstudy":
            cfg = _load_config(args)
            if args.n_trials is not None:
                cfg.params["simstudy"]["n_trials"] = args.n_trials
                cfg.validate()
            section = _suite_simstudy(cfg, None)
            cfg.out.mkdir(parents=True, exist_ok=True)
            t = section["table"]
            with (cfg.out / "failure_table.csv").open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["eps"] + [str(n) for n in t["n_grid"]])
                w.writerows([e] + row for e, row in zip(t["eps_grid"], t["frequencies"]))
            rec = {k: section[k] for k in ("recommended_n", "eps", "max_failure")}
            rec["n_trials"] = t["n_trials"]
            (cfg.out / "recommendation.json").write_text(json.dumps(rec, indent=2) + "\n", encoding="utf-8")
            print(f"recommended N at eps={rec['eps']}: {rec['recommended_n']}")
            return EXIT_OK
        if args.command == "report-plots":
            names = report_plots(args.report, Path(args.out))
            print(f"wrote {len(names)} CSV files to {args.out}")
            return EXIT_OK
        if args.command == "gen":
            if args.n < 1:
                raise ConfigError("--n must be >= 1")
            out = Path(args.out)
            out.parent.mkdir(parents=True, exist_ok=True)
            write_dataset(GENERATORS[args.scenario](args.n, args.seed), out)
            print(f"wrote {args.n} records to {out}")
            return EXIT_OK
    except (ConfigError, DatasetError, AdapterError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        # a suite rejected its input; report it as a configuration problem
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
