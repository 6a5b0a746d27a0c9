import csv
import json

import pytest

from annulus_sle.errors import ConfigError
from annulus_sle.xcli import DEFAULTS, EXPERIMENTS, build_parser, main, merge_config

SMALL = {
    "check-kernel": {"n_r": 3, "n_z": 5, "n_boundary": 20, "n_bound_r": 4},
    "martingale-continuum": {"n_rep": 40, "control_n_rep": 40, "times": [0.0, 0.1], "dt": 1e-2},
    "martingale-discrete": {"n_seeds": 2, "delta": 0.1},
    "observable-convergence": {"deltas": [0.1, 0.05]},
    "driving-stats": {"delta": 0.05, "n_rep": 6, "times": [0.05, 0.1]},
    "hitting-law": {"delta": 0.05, "n_rep": 60},
    "reversibility": {"tiny_n": 4, "tiny_p": 2.0, "n": 8, "n_rep": 40},
    "disc-harmonic-measure": {"n_rep": 3, "batch": 3, "scan": 6, "bisect": 4},
    "run-sle": {"horizon": 0.2, "dt": 1e-2, "checkpoints": [0.0, 0.1], "trace_times": [0.1]},
    "sample-lerw": {"delta": 0.1, "n_samples": 2},
}

CSV_FILES = {
    "check-kernel": ["kernel_residuals.csv"],
    "martingale-continuum": ["continuum_means.csv"],
    "martingale-discrete": ["discrete_residuals.csv"],
    "observable-convergence": ["observable_gaps.csv"],
    "driving-stats": ["driving_samples.csv"],
    "hitting-law": ["hitting_oracle.csv", "hitting_samples.csv"],
    "reversibility": ["reversibility_functionals.csv"],
    "disc-harmonic-measure": ["disc_angles.csv"],
    "run-sle": ["trajectory.csv", "trace.csv", "driving.csv"],
    "sample-lerw": ["lerw_5.csv"],
}


def run_cli(tmp_path, name, cfg, seed=5, sub="out"):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / sub
    code = main([name, "--config", str(cfg_path), "--seed", str(seed), "--out", str(out)])
    return code, out


def test_every_subcommand_has_defaults():
    assert set(EXPERIMENTS) <= set(DEFAULTS)
    parser = build_parser()
    for name in EXPERIMENTS:
        assert parser.parse_args([name]).command == name


@pytest.mark.parametrize("name", sorted(SMALL))
def test_small_run_writes_report_and_csv(tmp_path, name):
    code, out = run_cli(tmp_path, name, SMALL[name])
    assert code in (0, 1)
    rep = json.loads((out / "report.json").read_text())
    assert rep["experiment"] == name and rep["seed_base"] == 5
    assert rep["verdict"] == (code == 0) == all(m["pass"] for m in rep["metrics"])
    for key, val in SMALL[name].items():
        assert rep["config"][key] == val
    for m in rep["metrics"]:
        assert {"name", "value", "tolerance", "pass"} <= set(m)
    for fname in CSV_FILES[name]:
        with open(out / fname) as fh:
            header = next(csv.reader(fh))
        assert header and all(h.strip() for h in header)


@pytest.mark.parametrize("name", ["hitting-law", "sample-lerw", "run-sle"])
def test_same_seed_same_report(tmp_path, name):
    _, a = run_cli(tmp_path, name, SMALL[name], sub="a")
    _, b = run_cli(tmp_path, name, SMALL[name], sub="b")
    ra = json.loads((a / "report.json").read_text())
    rb = json.loads((b / "report.json").read_text())
    ra.pop("runtime_s"), rb.pop("runtime_s")
    assert ra == rb


def test_kernel_suite_passes(tmp_path):
    code, _ = run_cli(tmp_path, "check-kernel", SMALL["check-kernel"])
    assert code == 0


class TestErrors:
    def test_unknown_key(self, tmp_path):
        code, _ = run_cli(tmp_path, "hitting-law", {"no_such_key": 1})
        assert code == 2

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["hitting-law", "--config", str(bad), "--out", str(tmp_path)]) == 2

    def test_non_object_config(self, tmp_path):
        code, _ = run_cli(tmp_path, "hitting-law", [1, 2])
        assert code == 2

    def test_negative_seed(self, tmp_path):
        assert main(["check-kernel", "--seed", "-1", "--out", str(tmp_path)]) == 2

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 2

    def test_bad_domain(self, tmp_path):
        code, _ = run_cli(tmp_path, "sample-lerw", {"domain": "torus"})
        assert code == 2

    def test_merge_config_rejects_zero_replicas(self):
        with pytest.raises(ConfigError):
            merge_config("hitting-law", {"n_rep": 0})

    def test_failing_verdict_exits_one(self, tmp_path):
        # an impossible tolerance makes the verdict fail without any error
        code, out = run_cli(tmp_path, "check-kernel", {**SMALL["check-kernel"], "tol": -1.0})
        assert code == 1
        assert json.loads((out / "report.json").read_text())["verdict"] is False


def test_thread_count_does_not_change_results(tmp_path, monkeypatch):
    monkeypatch.setenv("ANNULUS_SLE_THREADS", "2")
    code, out = run_cli(tmp_path, "driving-stats", SMALL["driving-stats"])
    rep = json.loads((out / "report.json").read_text())
    monkeypatch.delenv("ANNULUS_SLE_THREADS")
    _, out1 = run_cli(tmp_path, "driving-stats", SMALL["driving-stats"], sub="single")
    rep1 = json.loads((out1 / "report.json").read_text())
    assert [m["value"] for m in rep["metrics"]] == [m["value"] for m in rep1["metrics"]]


def test_config_schema_matches_defaults():
    jsonschema = pytest.importorskip("jsonschema")
    from pathlib import Path

    schema = json.loads((Path(__file__).parents[1] / "docs" / "config_schema.json").read_text())
    for name in EXPERIMENTS:
        sub = schema["$defs"][name]
        assert set(sub["properties"]) - {"experiment"} == set(DEFAULTS[name])
        jsonschema.validate(DEFAULTS[name], sub)
        jsonschema.validate(SMALL[name], sub)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"no_such_key": 1}, schema["$defs"]["hitting-law"])
