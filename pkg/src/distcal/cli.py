"""Command-line front end.

Every subcommand reads a JSON config that is validated against a versioned
schema shipped with the package, writes one JSON or CSV file, and embeds a
metadata block (tool version, config hash, seed).  Outputs contain no
timestamps, so a rerun with the same inputs is byte-identical.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.  Errors are
written to standard error as a single JSON object.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd

from . import __version__
from .calibration import (
    calibrated_ci,
    influence_covariance,
    max_abs_correlation,
    robust_ci,
    scaled_estimator_ci,
)
from .estimation import AdjustmentSet, Dataset, build_bundle, naive_ci
from .experiments import scm, stability
from .perturbation import PerturbationSpec, variance_law_probe
from .stats_core import DomainError, RandomStream

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
SCHEMA_VERSION = 1
NEAR_SINGULAR = 3e-3
COMMANDS = ("calibrate", "simulate-delta", "simulate-coverage", "stability", "probe-perturbation")


class UsageError(Exception):
    pass


def load_schema(command: str) -> dict:
    text = resources.files("distcal.schemas").joinpath(f"{command}.v{SCHEMA_VERSION}.json").read_text("utf-8")
    return json.loads(text)


def validate_config(command: str, config) -> dict:
    """Validate ``config`` and return it with top-level defaults filled in."""
    schema = load_schema(command)
    try:
        jsonschema.validate(config, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config invalid at {where}: {exc.message}") from None
    out = {k: v["default"] for k, v in schema["properties"].items() if "default" in v}
    out.update(config)
    out["schema_version"] = SCHEMA_VERSION
    return out


def _read_config(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def metadata(command: str, config: dict, seed: int, **extra) -> dict:
    meta = {
        "tool": "distcal",
        "version": __version__,
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "config_sha256": hashlib.sha256(_canonical(config).encode()).hexdigest(),
        "seed": seed,
        "config": config,
    }
    meta.update(extra)
    return meta


def _clean(obj):
    """Make a structure JSON-safe: numpy scalars to Python, NaN and inf to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def render_json(meta: dict, body: dict) -> str:
    return json.dumps(_clean({"metadata": meta, **body}), sort_keys=True, indent=2, allow_nan=False) + "\n"


def render_csv(meta: dict, rows: list[dict]) -> str:
    """RFC-4180 table preceded by ``#`` comment lines carrying the metadata."""
    buf = io.StringIO()
    for key in ("tool", "version", "command", "schema_version", "config_sha256", "seed"):
        buf.write(f"# {key}: {meta[key]}\r\n")
    buf.write(f"# config: {_canonical(meta['config'])}\r\n")
    fields: list[str] = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n")
    writer.writeheader()
    for row in _clean(rows):
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def _write(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise UsageError(f"cannot write output {path}: {exc.strerror}") from None


def _file_sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# calibrate ------------------------------------------------------------------

def _load_calibration_data(path: str, config: dict) -> Dataset:
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read data {path}: {exc}") from None
    used = [config["target"]] + sorted({c for s in config["adjustment_sets"] for c in s} - {config["target"]})
    missing = sorted(set(used + [config["response"]]) - set(frame.columns))
    if missing:
        raise UsageError(f"data is missing columns: {missing}")
    try:
        sub = frame[used + [config["response"]]].apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as exc:
        raise UsageError(f"non-numeric data in a used column: {exc}") from None
    return Dataset.from_frame(sub, config["response"])


def _condition_diagnostics(bundle, rank_tol: float) -> dict:
    cov = influence_covariance(bundle)
    sd = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = cov / np.outer(sd, sd)
    eig = np.linalg.eigvalsh(np.nan_to_num(corr))
    hi = float(eig[-1])
    tol = rank_tol if rank_tol > 0 else bundle.K * 1e-12
    return {
        "correlation_eigenvalues": [float(x) for x in eig],
        "condition_number": float(hi / eig[0]) if eig[0] > 0 else None,
        "max_abs_correlation": max_abs_correlation(bundle),
        "numerical_rank": int(np.sum(eig > tol * hi)),
    }


def cmd_calibrate(args) -> tuple[str, list[str]]:
    raw = _read_config(args.config)
    config = validate_config("calibrate", raw)
    data = _load_calibration_data(args.data, config)
    names = config.get("labels") or []
    sets = []
    for k, cols in enumerate(config["adjustment_sets"]):
        aset = AdjustmentSet.from_names(data, cols, config["target"])
        if k < len(names):
            aset = AdjustmentSet(aset.indices, aset.target_position, names[k])
        sets.append(aset)
    bundle = build_bundle(data, sets)
    alpha = config["alpha"]
    warnings = []
    if config["trusted"] is not None:
        result = robust_ci(bundle, config["trusted"], alpha)
    else:
        auto = {"auto": None, True: True, False: False}[config["decorrelate"]]
        result = calibrated_ci(bundle, alpha, auto, config["ridge"], config["rank_tol"])
    if result.degenerate:
        warnings.append("estimators coincide; the calibrated interval has zero width")
    diagnostics = _condition_diagnostics(bundle, config["rank_tol"])
    eig = diagnostics["correlation_eigenvalues"]
    if result.decorrelated and config["rank_tol"] == 0 and eig[0] < NEAR_SINGULAR * eig[-1]:
        warnings.append(
            f"influence correlation is nearly singular (eigenvalue ratio {eig[0] / eig[-1]:.1e}); "
            "drop near-duplicate estimators or set rank_tol"
        )
    estimators = []
    for k in range(bundle.K):
        estimators.append({
            "label": bundle.labels[k],
            "estimate": float(bundle.estimates[k]),
            "variance": float(bundle.variances[k]),
            "std_error": math.sqrt(bundle.variances[k] / bundle.n),
            "naive_interval": list(naive_ci(bundle.estimates[k], bundle.variances[k], bundle.n, alpha)),
            "scaled_interval": list(scaled_estimator_ci(bundle, k, result.delta_hat, alpha)),
        })
    meta = metadata("calibrate", config, args.seed, data_sha256=_file_sha256(args.data), n=bundle.n)
    if args.format == "json":
        body = {
            "result": result.to_json(),
            "estimators": estimators,
            "diagnostics": diagnostics,
            "warnings": warnings,
        }
        return render_json(meta, body), warnings
    rows = [{
        "label": "calibrated", "estimate": result.theta_w, "lower": result.lower, "upper": result.upper,
        "delta_hat": result.delta_hat, "sigma_bet": result.sigma_bet, "df": result.df,
    }]
    for e in estimators:
        rows.append({
            "label": e["label"], "estimate": e["estimate"], "std_error": e["std_error"],
            "naive_lower": e["naive_interval"][0], "naive_upper": e["naive_interval"][1],
            "scaled_lower": e["scaled_interval"][0], "scaled_upper": e["scaled_interval"][1],
        })
    return render_csv(meta, rows), warnings


# experiments -------------------------------------------------------------------

def _grid(config: dict, seed: int) -> list[scm.ScmConfig]:
    try:
        return scm.grid_configs(
            tuple(config["ns"]), tuple(config["ms"]), tuple(config["models"]),
            tuple(config["misspecified"]), config["replicates"], config["alpha"], seed, config["rank_tol"],
        )
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def _table_output(command: str, config: dict, seed: int, rows: list[dict], fmt: str, **extra) -> str:
    meta = metadata(command, config, seed)
    if fmt == "json":
        return render_json(meta, {"rows": rows, **extra})
    return render_csv(meta, rows)


def cmd_simulate_delta(args) -> tuple[str, list[str]]:
    config = validate_config("simulate-delta", _read_config(args.config))
    rows = [scm.run_delta_experiment(c) for c in _grid(config, args.seed)]
    return _table_output("simulate-delta", config, args.seed, rows, args.format), []


def cmd_simulate_coverage(args) -> tuple[str, list[str]]:
    config = validate_config("simulate-coverage", _read_config(args.config))
    rows = [scm.run_coverage_experiment(c) for c in _grid(config, args.seed)]
    return _table_output("simulate-coverage", config, args.seed, rows, args.format), []


def cmd_stability(args) -> tuple[str, list[str]]:
    config = validate_config("stability", _read_config(args.config))
    ks = config["n_covariate_sets"]
    ks = [ks] if isinstance(ks, int) else list(ks)
    pool = tuple(config.get("pool", stability.DEFAULT_POOL))
    data = stability.load_student_data(config["data_path"], pool)
    similarity, lengths, regen = [], [], {}
    for K in ks:
        cfg = stability.StabilityConfig(
            config["data_path"], K, config["replicates"],
            tuple(config.get("selected_covariates", stability.SELECTED_NAMES)), args.seed,
            config["alpha"], pool, config["rank_tol"],
        )
        res = stability.run_stability_experiment(cfg, data)
        similarity.extend(res.similarity_rows())
        lengths.extend(res.length_rows())
        regen[str(K)] = res.regenerations
    meta = metadata("stability", config, args.seed, data_sha256=_file_sha256(config["data_path"]))
    if args.format == "json":
        return render_json(meta, {"similarity": similarity, "ci_lengths": lengths, "regenerations": regen}), []
    rows = [{"table": "similarity", **r} for r in similarity] + [{"table": "ci_length", **r} for r in lengths]
    return render_csv(meta, rows), []


def cmd_probe(args) -> tuple[str, list[str]]:
    config = validate_config("probe-perturbation", _read_config(args.config))
    spec = PerturbationSpec.from_json(config["perturbation"])
    probe = variance_law_probe(spec, config["event_probs"], config["replicates"], RandomStream(args.seed))
    rows = [{
        "p": r.p, "variance": r.variance, "std_error": r.std_error,
        "ratio": r.variance / (r.p * (1 - r.p)), "ratio_std_error": r.std_error / (r.p * (1 - r.p)),
    } for r in probe]
    return _table_output("probe-perturbation", config, args.seed, rows, args.format), []


HANDLERS = {
    "calibrate": cmd_calibrate,
    "simulate-delta": cmd_simulate_delta,
    "simulate-coverage": cmd_simulate_coverage,
    "stability": cmd_stability,
    "probe-perturbation": cmd_probe,
}


# plumbing -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="distcal", description="Calibrated inference under distributional uncertainty.")
    parser.add_argument("--version", action="version", version=f"distcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "calibrate":
            p.add_argument("--data", required=True, help="CSV with a header row")
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output file")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--seed", type=_seed, default=0)
    return parser


def _emit_error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message, "exit_code": code}}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        text, warnings = HANDLERS[args.command](args)
        _write(args.out, text)
    except UsageError as exc:
        return _emit_error("ValidationError", str(exc), EXIT_INVALID)
    except (ValueError, OSError) as exc:
        # DomainError and its subclasses, ingestion and schema problems
        return _emit_error(type(exc).__name__, str(exc), EXIT_INVALID)
    except ArithmeticError as exc:
        return _emit_error(type(exc).__name__, str(exc), EXIT_NUMERICAL)
    for w in warnings:
        sys.stderr.write(json.dumps({"warning": w}) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
