import csv
import json
import time

import numpy as np
import pytest

from dlcert.cli import (
    EXIT_ERROR,
    EXIT_FAIL,
    EXIT_OK,
    ConfigError,
    RunConfig,
    deterministic_view,
    main,
    report_plots,
)
from dlcert.datamodel import load_dataset


def _config(tmp_path, body: str, name="run.toml"):
    path = tmp_path / name
    path.write_text(body)
    return path


def _gen(tmp_path, scenario, n, seed=0):
    out = tmp_path / f"{scenario}.jsonl"
    assert main(["gen", scenario, "--n", str(n), "--seed", str(seed), "--out", str(out)]) == EXIT_OK
    return out


def test_perfect_calibration_certifies(tmp_path):
    data = _gen(tmp_path, "perfect", 20_000)
    cfg = _config(tmp_path, f'out = "o"\n[data]\npath = "{data.name}"\n[suites]\ncalibration = true\n')
    assert main(["certify", "--config", str(cfg)]) == EXIT_OK
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["certified"] and report["suites"]["calibration"]["passed"]
    assert (tmp_path / "o" / "report.md").read_text().startswith("# Certification report")


def test_conditional_failure_names_subgroup(tmp_path):
    data = _gen(tmp_path, "conditional-failure", 30_000)
    cfg = _config(tmp_path, f'out = "o"\n[data]\npath = "{data.name}"\n[calibration]\nn_min = 5000\n')
    assert main(["certify", "--config", str(cfg)]) == EXIT_FAIL
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    failing = report["suites"]["calibration"]["failing_subgroups"]
    assert failing and failing[0]["conditioning"][0]["lo"] == 1.0


def test_configuration_errors_exit_two(tmp_path, capsys):
    assert main(["certify", "--config", str(tmp_path / "absent.toml")]) == EXIT_ERROR
    cfg = _config(tmp_path, '[data]\npath = "missing.jsonl"\n')
    assert main(["certify", "--config", str(cfg)]) == EXIT_ERROR
    assert "missing.jsonl" in capsys.readouterr().err
    bad = _config(tmp_path, "[calibration]\neps = 1.5\n", "bad.toml")
    assert main(["certify", "--config", str(bad)]) == EXIT_ERROR
    typo = _config(tmp_path, "[calibraton]\neps = 0.1\n", "typo.toml")
    assert main(["certify", "--config", str(typo)]) == EXIT_ERROR


def test_suite_input_errors_exit_two(tmp_path):
    data = _gen(tmp_path, "perfect", 100)
    cfg = _config(tmp_path, f'out = "o"\n[data]\npath = "{data.name}"\n[suites]\ndisentanglement = true\n')
    assert main(["certify", "--config", str(cfg)]) == EXIT_ERROR


def test_reports_are_deterministic(tmp_path):
    data = _gen(tmp_path, "toy-latents", 500)
    body = (f'[data]\npath = "{data.name}"\n[suites]\ncalibration = false\ndisentanglement = true\n'
            'lipschitz = true\n[lipschitz]\nlayers = [{kind = "residual", alpha = 0.1}, '
            '{kind = "residual", alpha = 0.1}, {kind = "residual", alpha = 0.1}]\n')
    cfg = _config(tmp_path, body)
    reports, codes = [], []
    for out in ("a", "b"):
        codes.append(main(["certify", "--config", str(cfg), "--out", str(tmp_path / out)]))
        reports.append(json.loads((tmp_path / out / "report.json").read_text()))
    assert codes[0] == codes[1] != EXIT_ERROR
    assert deterministic_view(reports[0]) == deterministic_view(reports[1])
    assert "created" in reports[0]["metadata"]
    lip = reports[0]["suites"]["lipschitz"]
    assert (lip["lower"], lip["upper"]) == (0.729, 1.331)


def test_exit_code_tracks_every_suite(tmp_path):
    data = _gen(tmp_path, "perfect", 20_000)
    body = (f'[data]\npath = "{data.name}"\n[suites]\ncalibration = true\nlipschitz = true\n'
            '[lipschitz]\nmin_lower = 0.9\nlayers = [{kind = "leaky_relu", alpha = 0.01}]\n')
    cfg = _config(tmp_path, body)
    assert main(["certify", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_FAIL
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["suites"]["calibration"]["passed"] and not report["suites"]["lipschitz"]["passed"]


def test_report_plots_bundle(tmp_path):
    n = 20_000
    data = _gen(tmp_path, "perfect", n)
    cfg = _config(tmp_path, f'out = "o"\n[data]\npath = "{data.name}"\n')
    main(["certify", "--config", str(cfg)])
    assert main(["report-plots", str(tmp_path / "o" / "report.json"), "--out", str(tmp_path / "p")]) == EXIT_OK
    with (tmp_path / "p" / "pit_histogram_0.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert sum(int(r["count"]) for r in rows) == n
    assert (tmp_path / "p" / "calibration_curve_0.csv").exists()
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert {f["file"] for f in manifest["files"]} == {"calibration_curve_0.csv", "pit_histogram_0.csv"}


def test_report_plots_empty_and_bad_version(tmp_path):
    report = tmp_path / "r.json"
    report.write_text(json.dumps({"report_version": 1, "certified": True, "suites": {}}))
    assert report_plots(report, tmp_path / "p") == []
    assert json.loads((tmp_path / "p" / "manifest.json").read_text())["files"] == []
    report.write_text(json.dumps({"report_version": 99}))
    with pytest.raises(ConfigError):
        report_plots(report, tmp_path / "q")
    assert main(["report-plots", str(report), "--out", str(tmp_path / "q")]) == EXIT_ERROR


def test_simstudy_smoke(tmp_path):
    start = time.perf_counter()
    assert main(["simstudy", "--n-trials", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert time.perf_counter() - start < 1.0
    rec = json.loads((tmp_path / "recommendation.json").read_text())
    assert rec["n_trials"] == 1 and rec["eps"] == 0.10
    header = (tmp_path / "failure_table.csv").read_text().splitlines()[0]
    assert header == "eps,10,100,1000,10000,100000"


def test_gen_roundtrip(tmp_path):
    ds = load_dataset(_gen(tmp_path, "time-varying", 50, seed=3))
    assert ds.n == 50 and ds.has_predictions
    assert main(["gen", "perfect", "--n", "0", "--out", str(tmp_path / "x.jsonl")]) == EXIT_ERROR


def test_config_defaults_mirror_documented_values():
    cfg = RunConfig.from_dict({"suites": {}})
    assert cfg.params["calibration"]["eps"] == 0.10
    assert cfg.params["calibration"]["n_min"] == 10_000
    assert cfg.params["ood"]["tau_ood"] == 0.15
    assert cfg.params["disentanglement"]["significance_level"] == 0.05
    assert RunConfig().suites == {"calibration": True}
    with pytest.raises(ConfigError, match="need data.path"):
        RunConfig.from_dict({})
