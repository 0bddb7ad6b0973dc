import csv
import hashlib
import io
import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from distcal import __version__
from distcal.cli import COMMANDS, load_schema, main, validate_config
from distcal.experiments.scm import ADJUSTMENT_SETS, generate_scm
from distcal.stats_core import RandomStream
from synthetic_student import write_synthetic_student_csv

SCM_CONFIG = {
    "response": "Y",
    "target": "X1",
    "adjustment_sets": [list(s) for s in ADJUSTMENT_SETS],
}


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


def write_scm_csv(path, n=1000, seed=0):
    data, _ = generate_scm(n, RandomStream(seed))
    frame = pd.DataFrame(data.values, columns=data.column_names)
    frame["Y"] = data.response
    frame.to_csv(path, index=False)
    return str(path)


def run(argv, capsys):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err
    lines = [json.loads(line) for line in err.splitlines() if line.strip()]
    return code, lines


@pytest.fixture
def scm_files(tmp_path):
    return write_scm_csv(tmp_path / "scm.csv"), write_json(tmp_path / "cfg.json", SCM_CONFIG), tmp_path


class TestSchemas:
    @pytest.mark.parametrize("command", COMMANDS)
    def test_schema_loads_and_is_versioned(self, command):
        schema = load_schema(command)
        assert schema["$id"].endswith("/v1")
        assert schema["additionalProperties"] is False

    def test_defaults_filled(self):
        cfg = validate_config("calibrate", SCM_CONFIG)
        assert cfg["alpha"] == 0.05 and cfg["decorrelate"] == "auto" and cfg["schema_version"] == 1


class TestCalibrate:
    def test_json_output(self, scm_files, capsys):
        data, cfg, tmp = scm_files
        out = tmp / "out.json"
        code, _ = run(["calibrate", "--data", data, "--config", cfg, "--out", out, "--seed", 5], capsys)
        assert code == 0
        obj = json.loads(out.read_text())
        meta = obj["metadata"]
        assert meta["tool"] == "distcal" and meta["version"] == __version__ and meta["seed"] == 5
        assert len(meta["config_sha256"]) == 64
        assert meta["data_sha256"] == hashlib.sha256(open(data, "rb").read()).hexdigest()
        res = obj["result"]
        assert res["lower"] <= res["theta_w"] <= res["upper"]
        assert len(obj["estimators"]) == 8
        for e in obj["estimators"]:
            assert e["scaled_interval"][0] <= e["estimate"] <= e["scaled_interval"][1]
        assert obj["diagnostics"]["numerical_rank"] <= 8

    def test_byte_identical(self, scm_files, capsys):
        data, cfg, tmp = scm_files
        for fmt in ("json", "csv"):
            a, b = tmp / f"a.{fmt}", tmp / f"b.{fmt}"
            for out in (a, b):
                assert run(["calibrate", "--data", data, "--config", cfg, "--out", out, "--format", fmt], capsys)[0] == 0
            assert a.read_bytes() == b.read_bytes()

    def test_csv_format(self, scm_files, capsys):
        data, cfg, tmp = scm_files
        out = tmp / "out.csv"
        assert run(["calibrate", "--data", data, "--config", cfg, "--out", out, "--format", "csv"], capsys)[0] == 0
        raw = out.read_bytes().decode("utf-8")
        body = "".join(line for line in raw.splitlines(keepends=True) if not line.startswith("#"))
        assert "\r\n" in body
        rows = list(csv.DictReader(io.StringIO(body)))
        assert rows[0]["label"] == "calibrated" and len(rows) == 9
        assert any(line.startswith("# config_sha256: ") for line in raw.splitlines())

    def test_identical_sets_degenerate(self, tmp_path, capsys):
        data = write_scm_csv(tmp_path / "d.csv", n=200)
        cfg = write_json(tmp_path / "c.json", {"response": "Y", "target": "X1",
                                               "adjustment_sets": [["X2"], ["X2"]], "decorrelate": False})
        out = tmp_path / "o.json"
        code, err = run(["calibrate", "--data", data, "--config", cfg, "--out", out], capsys)
        assert code == 0
        res = json.loads(out.read_text())["result"]
        assert res["lower"] == res["upper"] and res["degenerate"]
        assert any("warning" in line for line in err)

    def test_robust_k2(self, tmp_path, capsys):
        data = write_scm_csv(tmp_path / "d.csv", n=200)
        cfg = write_json(tmp_path / "c.json", {"response": "Y", "target": "X1",
                                               "adjustment_sets": [["X2"], ["X2", "X3"]], "trusted": 0})
        code, err = run(["calibrate", "--data", data, "--config", cfg, "--out", tmp_path / "o.json"], capsys)
        assert code == 2
        assert "insufficient estimators" in err[0]["error"]["message"]

    def test_robust_mode(self, scm_files, capsys):
        data, _, tmp = scm_files
        cfg = write_json(tmp / "r.json", {**SCM_CONFIG, "trusted": 0})
        out = tmp / "o.json"
        assert run(["calibrate", "--data", data, "--config", cfg, "--out", out], capsys)[0] == 0
        res = json.loads(out.read_text())["result"]
        assert res["df"] == 6 and res["weights"][0] == 0.0

    def test_schema_error(self, scm_files, capsys):
        data, _, tmp = scm_files
        cfg = write_json(tmp / "bad.json", {**SCM_CONFIG, "alpha": 2})
        code, err = run(["calibrate", "--data", data, "--config", cfg, "--out", tmp / "o.json"], capsys)
        assert code == 2 and err[0]["error"]["exit_code"] == 2
        cfg = write_json(tmp / "bad2.json", {**SCM_CONFIG, "unknown": 1})
        assert run(["calibrate", "--data", data, "--config", cfg, "--out", tmp / "o.json"], capsys)[0] == 2

    def test_missing_column(self, scm_files, capsys):
        data, _, tmp = scm_files
        cfg = write_json(tmp / "c.json", {**SCM_CONFIG, "adjustment_sets": [["X2"], ["X9"]]})
        code, err = run(["calibrate", "--data", data, "--config", cfg, "--out", tmp / "o.json"], capsys)
        assert code == 2 and "X9" in err[0]["error"]["message"]

    def test_collinear_is_numerical(self, tmp_path, capsys):
        frame = pd.read_csv(write_scm_csv(tmp_path / "d.csv", n=200))
        frame["X6"] = 2 * frame["X2"]
        frame.to_csv(tmp_path / "d.csv", index=False)
        cfg = write_json(tmp_path / "c.json", {"response": "Y", "target": "X1",
                                               "adjustment_sets": [["X2"], ["X2", "X6"]]})
        code, _ = run(["calibrate", "--data", tmp_path / "d.csv", "--config", cfg, "--out", tmp_path / "o.json"], capsys)
        assert code == 3

    @pytest.mark.parametrize("seed", ["-1", str(2**64), "abc"])
    def test_bad_seed(self, scm_files, capsys, seed):
        data, cfg, tmp = scm_files
        code, _ = run(["calibrate", "--data", data, "--config", cfg, "--out", tmp / "o.json", "--seed", seed], capsys)
        assert code == 2

    def test_missing_files(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", SCM_CONFIG)
        assert run(["calibrate", "--data", tmp_path / "none.csv", "--config", cfg, "--out", tmp_path / "o"], capsys)[0] == 2
        assert run(["calibrate", "--data", tmp_path / "none.csv", "--config", tmp_path / "no.json",
                    "--out", tmp_path / "o"], capsys)[0] == 2

    def test_scm_rerun_coverage(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", SCM_CONFIG)
        hits = []
        for seed in range(200):
            data = write_scm_csv(tmp_path / "d.csv", n=1000, seed=1000 + seed)
            out = tmp_path / "o.json"
            assert run(["calibrate", "--data", data, "--config", cfg, "--out", out], capsys)[0] == 0
            res = json.loads(out.read_text())["result"]
            hits.append(res["lower"] <= 1.0 <= res["upper"])
        assert np.mean(hits) >= 0.93


class TestExperimentCommands:
    def test_simulate_delta_single_replicate(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"ns": [200], "ms": [200, 500], "models": ["Resample"],
                                               "misspecified": [False], "replicates": 1})
        out = tmp_path / "o.json"
        assert run(["simulate-delta", "--config", cfg, "--out", out, "--seed", 1], capsys)[0] == 0
        rows = json.loads(out.read_text())["rows"]
        assert len(rows) == 2 and all(r["replicates"] == 1 for r in rows)

    def test_simulate_coverage_csv_deterministic(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"ns": [200], "ms": [200], "models": ["BinnedGamma"],
                                               "misspecified": [False, True], "replicates": 5})
        outs = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for out in outs:
            assert run(["simulate-coverage", "--config", cfg, "--out", out, "--format", "csv", "--seed", 9], capsys)[0] == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()
        body = [line for line in outs[0].read_text().splitlines() if not line.startswith("#")]
        assert len(body) == 3 and "calibrated_coverage" in body[0]

    def test_schema_error_exit(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"replicates": 0})
        code, err = run(["simulate-delta", "--config", cfg, "--out", tmp_path / "o.json"], capsys)
        assert code == 2 and "error" in err[0]

    def test_probe(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"perturbation": {"model": "DiscreteExchangeable", "m": 20,
                                                                "concentration": 1.0},
                                               "event_probs": [0.2, 0.5], "replicates": 1000})
        out = tmp_path / "o.json"
        assert run(["probe-perturbation", "--config", cfg, "--out", out], capsys)[0] == 0
        rows = json.loads(out.read_text())["rows"]
        assert [r["p"] for r in rows] == [0.2, 0.5]

    def test_stability(self, tmp_path, capsys):
        data = write_synthetic_student_csv(tmp_path / "student-por.csv", 649, seed=1)
        cfg = write_json(tmp_path / "c.json", {"data_path": str(data), "n_covariate_sets": [3, 4],
                                               "replicates": 4})
        out = tmp_path / "o.json"
        assert run(["stability", "--config", cfg, "--out", out], capsys)[0] == 0
        obj = json.loads(out.read_text())
        assert len(obj["similarity"]) == 4 and len(obj["ci_lengths"]) == 28
        assert obj["metadata"]["data_sha256"]

    def test_stability_bad_data(self, tmp_path, capsys):
        pd.DataFrame({"a": [1]}).to_csv(tmp_path / "s.csv", sep=";", index=False)
        cfg = write_json(tmp_path / "c.json", {"data_path": str(tmp_path / "s.csv")})
        code, err = run(["stability", "--config", cfg, "--out", tmp_path / "o.json"], capsys)
        assert code == 2 and "missing columns" in err[0]["error"]["message"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "distcal.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and __version__ in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "distcal.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"]["exit_code"] == 2
