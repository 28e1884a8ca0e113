"""Command-line entry point: ``coarse-snmm {simulate,estimate,bootstrap,mc-study}``.

Exit codes: 0 success, 2 configuration/input error, 3 estimation failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import DataError, emit_csv, ingest_csv
from .inference import BootstrapFailure, bootstrap
from .pipeline import MENU, EstimationError, EstimatorConfig, Pipeline, spec_for
from .simulator import SimulationConfig, marginal_checks, simulate
from .study import StudyConfig, run_study

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 2, 3


class ConfigError(Exception):
    pass


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            out = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(out, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return out


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, default=_jsonable)
    if path is None or path == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, (set, tuple)):
        return list(x)
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _estimator_config(args) -> tuple[EstimatorConfig, dict]:
    raw = _load_json(args.config)
    data_section = raw.pop("data", {})
    if args.blip is not None:
        raw["blip"] = args.blip
    if getattr(args, "no_censoring", False):
        raw.setdefault("censoring", {})
        if isinstance(raw["censoring"], dict):
            raw["censoring"]["enabled"] = False
        else:
            raw["censoring"] = False
    try:
        return EstimatorConfig.from_dict(raw), data_section
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _load_data(args, data_section: dict):
    schema = args.schema or data_section.get("schema", ["injdrug"])
    K = args.K if args.K is not None else data_section.get("K", 18)
    window = args.window if args.window is not None else data_section.get("window", 12)
    try:
        return ingest_csv(args.data, schema, K=K, window=window)
    except (OSError, DataError) as exc:
        raise ConfigError(str(exc)) from None


def _estimate(args):
    config, data_section = _estimator_config(args)
    try:
        spec = spec_for(args.estimator)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = _load_data(args, data_section)
    pipeline = Pipeline(ds, config)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = pipeline.estimate(spec)
        try:
            se = np.sqrt(np.clip(np.diag(res.sandwich()), 0, None)).tolist()
        except np.linalg.LinAlgError:
            se = None
    out = {
        "estimator": spec.menu_id,
        "psi_hat": res.psi_hat.tolist(),
        "sandwich_se": se,
        "diagnostics": res.diagnostics,
        "warnings": sorted({str(w.message) for w in caught}),
        "spec": {"estimator": asdict(spec),
                 "config": config.to_dict(), "data": str(args.data), "n": ds.n, "K": ds.K},
    }
    return pipeline, spec, out


def cmd_simulate(args) -> int:
    overrides = _load_json(args.config)
    overrides["n"] = args.n
    overrides["seed"] = args.seed
    try:
        cfg = SimulationConfig.from_dict(overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cohort = simulate(cfg)
    emit_csv(cohort.observed, args.out)
    if args.truth_out:
        _write_json({"truth": cohort.truth, "config": cfg.to_dict(), "checks": marginal_checks(cohort)},
                    args.truth_out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    _, _, out = _estimate(args)
    _write_json(out, args.out)
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    if args.B < 1:
        raise ConfigError("--B must be at least 1")
    pipeline, spec, out = _estimate(args)
    if args.out and args.out != "-" and Path(args.out).exists():
        try:
            previous = json.loads(Path(args.out).read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            raise ConfigError(f"{args.out} exists but is not JSON") from None
        if previous.get("estimator") == out["estimator"]:
            out = {**previous, **{k: out[k] for k in ("psi_hat", "diagnostics")}}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = bootstrap(pipeline, spec, B=args.B, seed=args.seed, level=args.level)
    out["bootstrap"] = res.to_dict()
    _write_json(out, args.out)
    return EXIT_OK


def cmd_mc_study(args) -> int:
    raw = _load_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.replicates is not None:
        raw["replicates"] = args.replicates
    if args.n is not None:
        raw["n"] = args.n
    if args.out:
        raw["out_csv"] = args.out
        stem = Path(args.out)
        raw.setdefault("out_effects_csv", str(stem.with_name(stem.stem + "_effects.csv")))
        raw.setdefault("out_json", str(stem.with_suffix(".json")))
    try:
        cfg = StudyConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    report = run_study(cfg)
    if not args.out:
        sys.stdout.write(report.table_csv())
    for menu_id in report.flagged():
        print(f"warning: estimator {menu_id} failed on more than 10% of replicates: "
              f"{report.failures[menu_id]}", file=sys.stderr)
    return EXIT_OK


def _add_data_args(p):
    p.add_argument("--data", required=True, help="long-format cohort CSV")
    p.add_argument("--schema", nargs="*", default=None, help="covariate columns after id,month,a,y")
    p.add_argument("--K", type=int, default=None, help="last decision month (default 18)")
    p.add_argument("--window", type=int, default=None, help="outcome window length (default 12)")
    p.add_argument("--estimator", default="5", help=f"menu entry: {', '.join(MENU)}")
    p.add_argument("--blip", choices=["two_param", "three_param"], default=None)
    p.add_argument("--config", default=None, help="estimator config JSON")
    p.add_argument("--no-censoring", action="store_true", help="disable the censoring model")
    p.add_argument("--out", default=None, help="results JSON (stdout if omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coarse-snmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a cohort to CSV")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="simulation config overrides (JSON)")
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate psi")
    _add_data_args(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bootstrap", help="percentile bootstrap intervals")
    _add_data_args(p)
    p.add_argument("--B", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("mc-study", help="Monte-Carlo study")
    p.add_argument("--config", default=None, help="study config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", default=None, help="summary CSV (stdout if omitted)")
    p.set_defaults(func=cmd_mc_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, BootstrapFailure) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
