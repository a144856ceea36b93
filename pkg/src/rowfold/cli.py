"""Batch command-line runner: analyze a CSV, simulate data, or benchmark.

Every run is driven by a JSON config file and emits a JSON report.
Reports are deterministic byte-for-byte for a fixed config and input:
keys are sorted, floats use Python's shortest round-trip repr, and wall
-clock timings are excluded unless explicitly requested (``bench``
reports are timings by nature and are exempt from byte determinism).

Exit codes: 0 success, 2 config problem, 3 data problem, 4 estimation
problem.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from .bayes import NormalPrior, Posterior  # noqa: F401  (re-exported for config docs)
from .covariance import cov_cluster, cov_iid, cov_white, summarize
from .dataset import Schema, compress, compression_ratio, uncompressed, write_csv
from .errors import ConfigError, DataError, EstimationError, RowfoldError
from .linear import ModelSpec, build_design, fit
from .quantile import balance, bootstrap_qte, fit_quantile
from .simgen import gen_ab, gen_panel

_COV_TAGS = ("iid", "hc0", "hc1", "cr0", "cr1")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4


def _check_keys(obj: dict, where: str, allowed: dict[str, type | tuple],
                required: tuple[str, ...] = ()) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}", key=key)
    for key in required:
        if key not in obj:
            raise ConfigError(f"missing required key {key!r} in {where}", key=key)
    for key, expected in allowed.items():
        if key in obj and obj[key] is not None and not isinstance(obj[key], expected):
            raise ConfigError(f"key {key!r} in {where} has the wrong type", key=key)


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _sanitize(value):
    """Make a value JSON-safe: numpy → native, non-finite floats → None."""
    if isinstance(value, dict):
        return {str(k): _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_sanitize(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _emit(report: dict, output: str | None) -> None:
    text = json.dumps(_sanitize(report), sort_keys=True, indent=2, allow_nan=False) + "\n"
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _thread_count(flag: int | None) -> int:
    if flag is not None:
        value = flag
    else:
        raw = os.environ.get("ROWFOLD_THREADS", "1")
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError("ROWFOLD_THREADS must be an integer") from None
    if value < 1:
        raise ConfigError("thread count must be at least 1")
    return value


# --------------------------------------------------------------------------
# analyze


def _resolve_analyze(cfg: dict) -> dict:
    _check_keys(
        cfg, "config",
        allowed={
            "input": str, "schema": dict, "model": dict, "covariance": list,
            "quantiles": list, "bootstrap": dict, "compress": bool,
            "confidence_level": (int, float), "timings": bool, "output": str,
        },
        required=("input", "schema"),
    )
    schema_cfg = dict(cfg["schema"])
    _check_keys(
        schema_cfg, "schema",
        allowed={
            "outcome": str, "treatment": str, "features": list, "weight": str,
            "cluster": str, "time": str, "control_label": str,
        },
        required=("outcome", "treatment"),
    )
    schema_cfg.setdefault("features", [])
    for opt in ("weight", "cluster", "time", "control_label"):
        schema_cfg.setdefault(opt, None)

    model_cfg = dict(cfg.get("model", {}))
    _check_keys(
        model_cfg, "model",
        allowed={
            "features": list, "intercept": bool, "treatment": bool,
            "interact_treatment": list, "weight_source": str,
        },
    )
    model_cfg.setdefault("features", list(schema_cfg["features"]))
    model_cfg.setdefault("intercept", True)
    model_cfg.setdefault("treatment", True)
    model_cfg.setdefault("interact_treatment", [])
    model_cfg.setdefault("weight_source", "column" if schema_cfg["weight"] else "none")
    if model_cfg["weight_source"] not in ("column", "none"):
        raise ConfigError("weight_source must be 'column' or 'none'", key="weight_source")
    if model_cfg["weight_source"] == "column" and not schema_cfg["weight"]:
        raise ConfigError(
            "weight_source 'column' needs a weight column in the schema", key="weight_source"
        )

    cov_tags = cfg.get("covariance", ["iid"])
    for tag in cov_tags:
        if tag not in _COV_TAGS:
            raise ConfigError(f"unknown covariance tag {tag!r}", key="covariance")
    if any(t.startswith("cr") for t in cov_tags) and not schema_cfg["cluster"]:
        raise ConfigError(
            "cluster-robust covariance needs a cluster column in the schema",
            key="covariance",
        )

    quantiles = cfg.get("quantiles", [])
    for tau in quantiles:
        if not isinstance(tau, (int, float)) or not 0 < tau < 1:
            raise ConfigError(f"quantile level {tau!r} must lie in (0, 1)", key="quantiles")

    boot = cfg.get("bootstrap")
    if boot is not None:
        boot = dict(boot)
        _check_keys(
            boot, "bootstrap",
            allowed={
                "tau": (int, float), "replicates": int, "seed": int,
                "level": (int, float), "arm": str,
            },
            required=("tau",),
        )
        boot.setdefault("replicates", 500)
        boot.setdefault("seed", 0)
        boot.setdefault("level", 0.95)
        boot.setdefault("arm", None)

    level = cfg.get("confidence_level", 0.95)
    if not 0 < level < 1:
        raise ConfigError("confidence_level must lie in (0, 1)", key="confidence_level")

    return {
        "input": cfg["input"],
        "schema": schema_cfg,
        "model": model_cfg,
        "covariance": list(cov_tags),
        "quantiles": list(quantiles),
        "bootstrap": boot,
        "compress": cfg.get("compress", True),
        "confidence_level": level,
        "timings": cfg.get("timings", False),
        "output": cfg.get("output"),
    }


def _quantile_block(design, tau: float) -> dict:
    qfit = fit_quantile(design, tau)
    report = balance(qfit)
    return {
        "beta": dict(zip(qfit.column_names, qfit.beta.tolist())),
        "objective": qfit.objective,
        "converged": qfit.converged,
        "iterations": qfit.iterations,
        "balanced": report.balanced,
        "fraction_negative": report.fraction_negative,
    }


def run_analyze(cfg: dict, threads: int = 1) -> dict:
    resolved = _resolve_analyze(cfg)
    clock: dict[str, float] = {}
    t0 = time.perf_counter()

    schema = Schema(
        outcome=resolved["schema"]["outcome"],
        treatment=resolved["schema"]["treatment"],
        features=tuple(resolved["schema"]["features"]),
        weight=resolved["schema"]["weight"],
        cluster=resolved["schema"]["cluster"],
        time=resolved["schema"]["time"],
        control_label=resolved["schema"]["control_label"],
    )
    ds, audit = ds_mod.load_csv(resolved["input"], schema)
    clock["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    folded = compress(ds)
    clock["compress"] = time.perf_counter() - t0

    needs_raw = any(t.startswith("cr") for t in resolved["covariance"])
    grain = uncompressed(ds) if (needs_raw or not resolved["compress"]) else folded

    spec = ModelSpec(
        features=tuple(resolved["model"]["features"]),
        intercept=resolved["model"]["intercept"],
        treatment=resolved["model"]["treatment"],
        interact_treatment=tuple(resolved["model"]["interact_treatment"]),
        weight_source=resolved["model"]["weight_source"],
    )
    t0 = time.perf_counter()
    design = build_design(grain, spec)
    result = fit(design)
    clock["fit"] = time.perf_counter() - t0

    level = resolved["confidence_level"]
    covariances = {}
    t0 = time.perf_counter()
    for tag in resolved["covariance"]:
        if tag == "iid":
            cov = cov_iid(result)
        elif tag in ("hc0", "hc1"):
            cov = cov_white(result, correction=tag)
        else:
            cov = cov_cluster(result, ds.cluster, correction=tag)
        table = summarize(result, cov, level=level)
        covariances[tag] = {
            "dof": cov.dof,
            "n_clusters": cov.n_clusters,
            "table": {
                term: {k: row[k] for k in table.columns}
                for term, row in table.iterrows()
            },
        }
    clock["covariance"] = time.perf_counter() - t0

    quantiles = {}
    if resolved["quantiles"]:
        t0 = time.perf_counter()
        taus = resolved["quantiles"]
        qdesign = build_design(folded, dataclasses.replace(spec, weight_source="none"))
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                blocks = list(pool.map(lambda tau: _quantile_block(qdesign, tau), taus))
        else:
            blocks = [_quantile_block(qdesign, tau) for tau in taus]
        quantiles = {f"{tau:g}": block for tau, block in zip(taus, blocks)}
        clock["quantiles"] = time.perf_counter() - t0

    boot_block = None
    if resolved["bootstrap"]:
        t0 = time.perf_counter()
        b = resolved["bootstrap"]
        qte_res = bootstrap_qte(
            ds, tau=float(b["tau"]), n_replicates=b["replicates"],
            level=b["level"], seed=b["seed"], treated_label=b["arm"],
        )
        boot_block = {
            "tau": qte_res.tau, "estimate": qte_res.estimate,
            "ci_low": qte_res.ci_low, "ci_high": qte_res.ci_high,
            "level": qte_res.level, "replicates": qte_res.n_replicates,
            "seed": qte_res.seed,
        }
        clock["bootstrap"] = time.perf_counter() - t0

    report = {
        "command": "analyze",
        "config": {k: v for k, v in resolved.items() if k != "output"},
        "input": {
            "rows": audit.row_count,
            "kept": audit.kept,
            "dropped_by_reason": audit.dropped_by_reason,
            "columns": {
                name: dataclasses.asdict(summary)
                for name, summary in audit.columns.items()
            },
        },
        "compression": {
            "unique_rows": folded.n_unique,
            "raw_rows": folded.n_raw,
            "ratio": compression_ratio(folded),
        },
        "estimate": {
            "beta": dict(zip(result.column_names, result.beta.tolist())),
            "n_raw": result.n_raw,
            "dof": result.dof,
            "weighted_rss": result.weighted_rss,
        },
        "covariances": covariances,
        "quantiles": quantiles,
        "bootstrap_qte": boot_block,
    }
    if resolved["timings"]:
        report["timings"] = clock
    return report


# --------------------------------------------------------------------------
# simulate

_SIM_SCHEMA = Schema(
    outcome="outcome", treatment="arm", weight="weight",
    cluster="account", time="period", control_label="control",
)


def _resolve_simulate(cfg: dict) -> dict:
    _check_keys(
        cfg, "config",
        allowed={"generator": str, "params": dict, "output": str},
        required=("generator", "params", "output"),
    )
    gen = cfg["generator"]
    if gen not in ("ab", "panel"):
        raise ConfigError(f"unknown generator {gen!r}", key="generator")
    params = dict(cfg["params"])
    allowed = {
        "ab": {
            "n": int, "effect": (int, float), "seed": int, "noise": str,
            "baseline": (int, float), "sigma": (int, float),
            "weight_spread": (int, float), "variance_power": (int, float),
            "zero_rate": (int, float), "cardinality": int,
        },
        "panel": {
            "n_accounts": int, "n_periods": int, "effect": (int, float),
            "seed": int, "effect_path": str, "error": str, "rho": (int, float),
            "sigma": (int, float), "baseline": (int, float),
        },
    }[gen]
    required = {"ab": ("n", "effect", "seed"), "panel": ("n_accounts", "n_periods", "effect", "seed")}[gen]
    _check_keys(params, "params", allowed=allowed, required=required)
    return {"generator": gen, "params": params, "output": cfg["output"]}


def run_simulate(cfg: dict) -> dict:
    resolved = _resolve_simulate(cfg)
    gen = gen_ab if resolved["generator"] == "ab" else gen_panel
    try:
        ds = gen(**resolved["params"])
    except TypeError as exc:
        raise ConfigError(f"bad generator parameters: {exc}") from None
    ds = dataclasses.replace(ds, schema=_SIM_SCHEMA)
    write_csv(ds, resolved["output"])
    return {
        "command": "simulate",
        "config": resolved,
        "rows": ds.n_rows,
        "arms": list(ds.arm_labels),
        "truth": ds.truth,
        "written": resolved["output"],
    }


# --------------------------------------------------------------------------
# bench


def _resolve_bench(cfg: dict) -> dict:
    _check_keys(
        cfg, "config",
        allowed={
            "rows": int, "cardinality": int, "effect": (int, float),
            "seed": int, "repeats": int, "output": str,
        },
        required=("rows",),
    )
    resolved = {
        "rows": cfg["rows"],
        "cardinality": cfg.get("cardinality", 100),
        "effect": cfg.get("effect", 0.1),
        "seed": cfg.get("seed", 0),
        "repeats": cfg.get("repeats", 3),
        "output": cfg.get("output"),
    }
    if resolved["rows"] < 100:
        raise ConfigError("benchmark needs at least 100 rows", key="rows")
    if resolved["repeats"] < 1:
        raise ConfigError("repeats must be at least 1", key="repeats")
    return resolved


def _best_time(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(cfg: dict) -> dict:
    """Time the same analysis at raw grain and at folded grain.

    The folded path's one-time compression cost is reported separately:
    in batch use one fold feeds many analyses (several covariances,
    quantile levels, bootstrap replicates), so the meaningful recurring
    cost is the per-analysis fit time.
    """
    resolved = _resolve_bench(cfg)
    ds = gen_ab(
        n=resolved["rows"], effect=resolved["effect"], seed=resolved["seed"],
        cardinality=resolved["cardinality"],
    )
    spec = ModelSpec(weight_source="none")

    t0 = time.perf_counter()
    folded = compress(ds)
    t_compress = time.perf_counter() - t0
    raw = uncompressed(ds)

    def analysis(grain):
        result = fit(build_design(grain, spec))
        cov_iid(result)
        cov_white(result)
        return result

    beta_raw = analysis(raw).beta
    beta_folded = analysis(folded).beta
    drift = float(np.max(np.abs(beta_raw - beta_folded)))

    t_raw = _best_time(lambda: analysis(raw), resolved["repeats"])
    t_folded = _best_time(lambda: analysis(folded), resolved["repeats"])

    return {
        "command": "bench",
        "config": {k: v for k, v in resolved.items() if k != "output"},
        "rows": ds.n_rows,
        "unique_rows": folded.n_unique,
        "compression_ratio": compression_ratio(folded),
        "seconds_compress": t_compress,
        "seconds_analysis_raw": t_raw,
        "seconds_analysis_folded": t_folded,
        "speedup": t_raw / t_folded if t_folded > 0 else math.inf,
        "max_coefficient_drift": drift,
    }


# --------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rowfold",
        description="Batch analysis of randomized experiments on folded rows.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("analyze", "fit models described by a JSON config against a CSV"),
        ("simulate", "generate a synthetic experiment CSV with known truth"),
        ("bench", "compare analysis time at raw vs folded grain"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a JSON config file")
        p.add_argument("--output", help="write the JSON report here instead of stdout")
        if name == "analyze":
            p.add_argument(
                "--parallel", type=int, default=None, metavar="N",
                help="threads for independent analysis blocks "
                     "(default: ROWFOLD_THREADS or 1)",
            )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.command == "analyze":
            report = run_analyze(cfg, threads=_thread_count(args.parallel))
            output = args.output or cfg.get("output")
        elif args.command == "simulate":
            # simulate's config "output" names the CSV, not the report
            report = run_simulate(cfg)
            output = args.output
        else:
            report = run_bench(cfg)
            output = args.output or cfg.get("output")
        _emit(report, output)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, RowfoldError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
