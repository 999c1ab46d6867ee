"""Command-line front end.

Usage: ``orderplacement <command> --config run.json [--seed N] [--out DIR] [--label L] [--workers N]``

Every command writes ``<out>/<command>-<label>/summary.json`` plus its CSV
tables. Exit status is 0 on success, 2 for configuration errors, 3 for
violated preconditions and 4 for numerical failures; errors are also printed
to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import experiments as ex
from .analytic import solve_single, solve_two
from .config import RunConfig, parse_config, schema_document
from .errors import ConfigError, OrderPlacementError
from .market import Allocation
from .sa import solve_sa
from .verification import estimate_kkt, solve_constrained

COMMANDS = (
    "solve-analytic", "solve-sa", "verify-kkt", "solve-dual", "evaluate", "sweep",
    "convergence", "fragmentation", "benchmark-table", "bucket-solve",
)


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _allocation_block(X: Allocation) -> dict:
    return {
        "allocation": X.to_dict(),
        "allocation_rounded": {"M": int(round(X.M)), "L": [int(round(v)) for v in X.L]},
    }


def _need(cfg: RunConfig, key: str):
    value = cfg.experiment.get(key)
    if value is None:
        raise ConfigError("required by this command", f"experiment.{key}")
    return value


def _target_allocation(cfg: RunConfig) -> Allocation:
    exp = cfg.experiment
    if exp.get("allocation") is not None:
        X = Allocation.from_dict(exp["allocation"])
    elif exp.get("allocation_from") is not None:
        path = Path(exp["allocation_from"])
        if not path.is_absolute():
            path = cfg.base_dir / path
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            X = Allocation.from_dict(data["allocation"])
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read an allocation from {path}: {exc}", "experiment.allocation_from") from None
    else:
        raise ConfigError("give 'allocation' or 'allocation_from'", "experiment")
    if X.K != cfg.spec.K:
        raise ConfigError(f"allocation has {X.K} limit sizes, market has K={cfg.spec.K}", "experiment.allocation")
    return X


def cmd_solve_analytic(cfg: RunConfig):
    if cfg.spec.K == 1:
        sol = solve_single(cfg.spec, cfg.model)
    elif cfg.spec.K == 2:
        sol = solve_two(cfg.spec, cfg.model)
    else:
        raise ConfigError(f"closed-form solvers cover K=1 and K=2, market has K={cfg.spec.K}", "market")
    result = {"solution": sol.to_dict(), "kind": type(sol).__name__}
    result.update(_allocation_block(sol.allocation))
    return result, {}


def cmd_solve_sa(cfg: RunConfig):
    rep = solve_sa(cfg.spec, cfg.model, cfg.sa)
    result = {"report": rep.to_dict()}
    result.update(_allocation_block(rep.X_hat))
    tables = {}
    if rep.trace:
        header = ["n", "M"] + [f"L{k}" for k in range(1, cfg.spec.K + 1)]
        tables["trace.csv"] = ([dict(zip(header, row)) for row in rep.trace], header)
    return result, tables


def cmd_verify_kkt(cfg: RunConfig):
    X = _target_allocation(cfg)
    count = cfg.experiment.get("count") or 100_000
    rep = estimate_kkt(X, cfg.spec, cfg.model, count=count, seed=cfg.seed, workers=cfg.workers)
    result = {"kkt": rep.to_dict(), "residuals_within_3se": rep.residuals_within(3.0)}
    result.update(_allocation_block(X))
    return result, {}


def cmd_solve_dual(cfg: RunConfig):
    exp = cfg.experiment
    rep = solve_constrained(cfg.spec, _need(cfg, "mu_u"), _need(cfg, "mu_o"), cfg.model, cfg.sa,
                            grid_points=exp["grid_points"], passes=exp["passes"])
    result = {"dual": rep.to_dict()}
    result.update(_allocation_block(rep.X_star))
    return result, {}


EVALUATION_HEADER = ["label", "avg_cost_per_share", "ci95_halfwidth", "avg_filled", "count"]


def cmd_evaluate(cfg: RunConfig):
    count = cfg.experiment.get("count") or 10_000
    draws = cfg.model.draw(ex.make_rng(ex.stream(cfg.seed, "evaluate")), count)
    allocations = dict(ex.benchmark_allocations(cfg.spec))
    exp = cfg.experiment
    if exp.get("allocation") is not None or exp.get("allocation_from") is not None:
        allocations = {"X": _target_allocation(cfg), **allocations}
    rows = [ex.evaluate_on(X, cfg.spec, draws, label).to_dict() for label, X in allocations.items()]
    return {"evaluations": rows}, {"evaluation.csv": (rows, EVALUATION_HEADER)}


def cmd_sweep(cfg: RunConfig):
    rows = ex.run_sensitivity_sweep(cfg.spec, cfg.model, _need(cfg, "parameter"), _need(cfg, "grid"), cfg.sa,
                                    workers=cfg.workers)
    return {"rows": len(rows)}, {"sweep.csv": (rows, ex.sweep_header(cfg.spec.K))}


def _starting_points(cfg: RunConfig) -> dict:
    spec = cfg.spec
    named = dict(ex.benchmark_allocations(spec))
    x0 = cfg.experiment.get("x0") or ["X_E"]
    if isinstance(x0, list):
        x0 = {name: None for name in x0}
    out = {}
    for name, value in x0.items():
        if value is not None:
            out[name] = Allocation.from_dict(value)
        elif name in named:
            out[name] = named[name]
        elif name == "X_star":
            out[name] = ex.reference_solution(spec, cfg.model, cfg.seed)
        else:
            raise ConfigError(f"starting point {name!r} needs an allocation value", f"experiment.x0.{name}")
    return out


def cmd_convergence(cfg: RunConfig):
    exp = cfg.experiment
    rows = ex.run_convergence_study(
        cfg.spec, cfg.model, _starting_points(cfg), _need(cfg, "N_grid"), exp.get("seeds") or [0],
        eval_count=exp.get("count") or 10_000, root_seed=cfg.seed, projection=cfg.sa.projection,
        workers=cfg.workers,
    )
    return {"rows": len(rows)}, {"convergence.csv": (rows, ex.CONVERGENCE_HEADER)}


def cmd_fragmentation(cfg: RunConfig):
    exp = cfg.experiment
    mu = exp.get("mu") or cfg.raw["outflow"]["means"][0]
    rows = ex.run_fragmentation_study(cfg.spec, mu, _need(cfg, "alpha_grid"), cfg.sa,
                                      eval_count=exp.get("count") or 10_000, root_seed=cfg.seed,
                                      horizon=cfg.raw["outflow"]["horizon"], workers=cfg.workers)
    return {"rows": len(rows)}, {"fragmentation.csv": (rows, ex.FRAGMENTATION_HEADER)}


def cmd_benchmark_table(cfg: RunConfig):
    exp = cfg.experiment
    K_list = _need(cfg, "K_list")
    outflow = cfg.raw["outflow"]
    rows = ex.run_benchmark_table(
        cfg.spec, K_list, exp.get("S_list") or [cfg.spec.S],
        alpha=exp["alpha"] if exp.get("alpha") is not None else (outflow["alpha"] if outflow["alpha"] is not None else 0.6),
        mu=exp.get("mu") or (outflow["means"] or [2200.0])[0],
        Q=exp["Q"] if exp.get("Q") is not None else cfg.spec.Q[0],
        horizon=outflow["horizon"], N=cfg.sa.iterations, eval_count=exp.get("count") or 1000,
        root_seed=cfg.seed, workers=cfg.workers,
    )
    return {"rows": len(rows)}, {"benchmark_table.csv": (rows, ex.benchmark_header(max(K_list)))}


def cmd_bucket_solve(cfg: RunConfig):
    if cfg.model.kind != "empirical":
        raise ConfigError("bucket-solve needs an empirical outflow file", "outflow.kind")
    exp = cfg.experiment
    table = ex.bucket_and_solve(cfg.model, cfg.spec, cfg.sa, exp.get("features"), exp["min_rows"], cfg.workers)
    rows = ex.bucket_rows(table, cfg.spec.K)
    result = {
        "features": table.features,
        "boundaries": {k: list(v) for k, v in table.boundaries.items()},
        "buckets": [sol.to_dict() for _, sol in sorted(table.buckets.items())],
    }
    return result, {"buckets.csv": (rows, ex.bucket_header(cfg.spec.K))}


HANDLERS = {
    "solve-analytic": cmd_solve_analytic,
    "solve-sa": cmd_solve_sa,
    "verify-kkt": cmd_verify_kkt,
    "solve-dual": cmd_solve_dual,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "convergence": cmd_convergence,
    "fragmentation": cmd_fragmentation,
    "benchmark-table": cmd_benchmark_table,
    "bucket-solve": cmd_bucket_solve,
}


def dispatch(command: str, cfg: RunConfig, out_dir, label: str) -> Path:
    """Run one command and write its summary and tables; returns the run directory."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    result, tables = HANDLERS[command](cfg)
    run_dir = Path(out_dir) / f"{command}-{label}"
    run_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "command": command,
        "label": label,
        "seed": cfg.seed,
        "status": "ok",
        "market": cfg.spec.to_dict(),
        "outflow": cfg.model.describe(),
        "config": cfg.raw,
        "defaults_applied": cfg.defaults_applied,
        "tables": sorted(tables),
    }
    summary.update(result)
    (run_dir / "summary.json").write_text(dumps(summary), encoding="utf-8")
    for name, (rows, header) in sorted(tables.items()):
        ex.write_csv(run_dir / name, rows, header)
    return run_dir


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orderplacement", description="Optimal market/limit order placement across venues.")
    p.add_argument("command", choices=COMMANDS + ("schema",))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--label", help="run label used in the output path (default: UTC timestamp)")
    p.add_argument("--workers", type=int, help="worker processes (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true", help="log filled-in defaults")
    return p


def _error_json(exc: Exception) -> dict:
    out = {"status": "error", "error": getattr(exc, "code", "error"), "message": str(exc)}
    for attr in ("key_path", "line"):
        if getattr(exc, attr, None) is not None:
            out[attr] = getattr(exc, attr)
    if getattr(exc, "violations", None):
        out["violations"] = [{"name": v.name, "detail": v.detail} for v in exc.violations]
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "schema":
            text = dumps(schema_document())
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "schema.json").write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return 0
        if not args.config:
            raise ConfigError("--config is required")
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be at least 1")
            cfg.workers = args.workers
        label = args.label or datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        run_dir = dispatch(args.command, cfg, args.out or cfg.output_dir, label)
        sys.stdout.write(str(run_dir / "summary.json") + "\n")
        return 0
    except OrderPlacementError as exc:
        sys.stderr.write(json.dumps(_error_json(exc), sort_keys=True) + "\n")
        return exc.exit_status


if __name__ == "__main__":
    sys.exit(main())
