"""Strict JSON run configuration: schema, validation and model construction."""

from __future__ import annotations

import copy
import difflib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DomainError
from .market import Allocation, MarketSpec, validate_assumptions
from .outflows import (
    ExponentialOutflow,
    FactorOutflow,
    OutflowModel,
    ParetoOutflow,
    PoissonOutflow,
    load_empirical,
)
from .sa import PROJECTIONS, SAConfig

log = logging.getLogger(__name__)

REQUIRED = object()

# (type, default, description); type is one of number, integer, string,
# numbers, integers, allocation, allocations, object, any
SCHEMA = {
    "seed": ("integer", 0, "root seed of every random stream"),
    "workers": ("integer", 1, "worker processes for Monte-Carlo partitions and grid points"),
    "market": {
        "h": ("number", REQUIRED, "half bid-ask spread, mills/share"),
        "f": ("number", REQUIRED, "market order fee, mills/share"),
        "r": ("numbers", REQUIRED, "limit order rebate per venue, mills/share"),
        "lambda_u": ("number", REQUIRED, "shortfall penalty, mills/share"),
        "lambda_o": ("number", REQUIRED, "overfill penalty, mills/share"),
        "S": ("number", REQUIRED, "target quantity, shares"),
        "Q": ("numbers", REQUIRED, "queue ahead of our limit order per venue, shares"),
    },
    "outflow": {
        "kind": ("string", REQUIRED, "exponential | pareto | poisson | factor | empirical"),
        "means": ("numbers", None, "mean outflow per venue per unit horizon, shares"),
        "horizon": ("number", 1.0, "horizon T; outflow means scale with it"),
        "tail_index": ("number", None, "Pareto tail index (> 1)"),
        "alpha": ("number", None, "factor weight in [0, 1]"),
        "common_mean": ("number", None, "mean of the common factor; defaults to the average venue mean"),
        "path": ("string", None, "empirical CSV file, relative to the config file"),
    },
    "solver": {
        "method": ("string", "sa", "analytic | sa"),
        "iterations": ("integer", 1000, "stochastic approximation steps N"),
        "X0": ("allocation", None, "starting allocation {M, L}; defaults to the equal split"),
        "step": ("number", None, "constant step; defaults to the scale-aware formula"),
        "burn_in_fraction": ("number", 0.0, "fraction of early iterates excluded from the average"),
        "projection": ("string", "truncate", "truncate | feasible | box | none"),
        "eval_count": ("integer", 10_000, "draws used to score the averaged iterate"),
        "trace_every": ("integer", 0, "record every n-th iterate (0 disables the trace)"),
    },
    "experiment": {
        "allocation": ("allocation", None, "allocation {M, L} to verify or evaluate"),
        "allocation_from": ("string", None, "summary.json whose 'allocation' is verified or evaluated"),
        "count": ("integer", None, "Monte-Carlo draws for verification or evaluation"),
        "mu_u": ("number", None, "expected shortfall limit for the constrained problem, shares"),
        "mu_o": ("number", None, "expected overfill limit for the constrained problem, shares"),
        "grid_points": ("integer", 25, "dual search grid size per penalty"),
        "passes": ("integer", 2, "coordinate-ascent passes over the dual grids"),
        "parameter": ("string", None, "sweep parameter: lambda_u, lambda_o, h, f, S, alpha, r_k, Q_k, mu_k"),
        "grid": ("numbers", None, "sweep values"),
        "x0": ("allocations", None, "named starting points; the names X_M, X_L, X_E, X_star need no value"),
        "N_grid": ("integers", None, "iteration counts for the convergence study"),
        "seeds": ("integers", None, "replication labels for the convergence study"),
        "alpha_grid": ("numbers", None, "factor weights for the fragmentation study"),
        "mu": ("number", None, "per-venue mean outflow for fragmentation and benchmark tables"),
        "K_list": ("integers", None, "venue counts for the benchmark table"),
        "S_list": ("numbers", None, "target sizes for the benchmark table"),
        "alpha": ("number", None, "factor weight for the benchmark table"),
        "Q": ("number", None, "per-venue queue for the benchmark table"),
        "features": ("strings", None, "feature columns used for tercile bucketing"),
        "min_rows": ("integer", 3, "smallest bucket that is solved"),
    },
    "output": {
        "dir": ("string", "results", "output directory"),
    },
}


def schema_document() -> dict:
    """The schema with units and defaults, as emitted by the ``schema`` command."""

    def render(node):
        out = {}
        for key, spec in node.items():
            if isinstance(spec, dict):
                out[key] = {"type": "object", "properties": render(spec)}
            else:
                typ, default, doc = spec
                entry = {"type": typ, "description": doc}
                if default is REQUIRED:
                    entry["required"] = True
                elif default is not None:
                    entry["default"] = default
                out[key] = entry
        return out

    return {"title": "order placement run configuration", "type": "object", "properties": render(SCHEMA)}


def _locate(text: str, path: list):
    """Best-effort line number of the last key in ``path`` within the raw JSON text."""
    pos = 0
    for key in path:
        if not isinstance(key, str):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if not m:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _check_type(value, typ):
    if typ == "number":
        return _is_number(value)
    if typ == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if typ == "string":
        return isinstance(value, str)
    if typ == "numbers":
        return isinstance(value, list) and len(value) > 0 and all(_is_number(v) for v in value)
    if typ == "integers":
        return isinstance(value, list) and len(value) > 0 and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    if typ == "strings":
        return isinstance(value, list) and all(isinstance(v, str) for v in value)
    if typ == "allocation":
        return (isinstance(value, dict) and set(value) == {"M", "L"} and _is_number(value["M"])
                and _check_type(value["L"], "numbers"))
    if typ == "allocations":
        if isinstance(value, list):
            return all(isinstance(v, str) for v in value)
        return isinstance(value, dict) and all(v is None or _check_type(v, "allocation") for v in value.values())
    return True


@dataclass
class RunConfig:
    spec: MarketSpec
    model: OutflowModel
    sa: SAConfig
    raw: dict
    seed: int = 0
    workers: int = 1
    output_dir: str = "results"
    defaults_applied: list = field(default_factory=list)
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def solver(self) -> dict:
        return self.raw["solver"]

    @property
    def experiment(self) -> dict:
        return self.raw["experiment"]

    def with_seed(self, seed: int) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        cfg = build_config(raw, self.base_dir)
        cfg.defaults_applied = list(self.defaults_applied)
        return cfg


def _validate(node: dict, schema: dict, path: list, text: str, defaults: list) -> dict:
    if not isinstance(node, dict):
        raise ConfigError("expected a JSON object", ".".join(path) or "<root>", _locate(text, path) if text else None)
    out = {}
    for key, value in node.items():
        if key not in schema:
            guess = difflib.get_close_matches(key, list(schema), n=1)
            hint = f"; did you mean {guess[0]!r}?" if guess else f"; allowed keys: {', '.join(sorted(schema))}"
            raise ConfigError(f"unknown key {key!r}{hint}", ".".join(path + [key]),
                              _locate(text, path + [key]) if text else None)
    for key, spec in schema.items():
        kpath = path + [key]
        if isinstance(spec, dict):
            out[key] = _validate(node.get(key, {}), spec, kpath, text, defaults)
            continue
        typ, default, _ = spec
        if key not in node or node[key] is None:
            if default is REQUIRED:
                raise ConfigError("missing required key", ".".join(kpath), _locate(text, path) if text else None)
            out[key] = copy.deepcopy(default)
            if default is not None:
                defaults.append(f"{'.'.join(kpath)}={default!r}")
                log.info("default %s = %r", ".".join(kpath), default)
            continue
        if not _check_type(node[key], typ):
            raise ConfigError(f"expected {typ}, got {node[key]!r}", ".".join(kpath),
                              _locate(text, kpath) if text else None)
        out[key] = node[key]
    return out


def build_model(block: dict, K: int, base_dir: Path) -> OutflowModel:
    kind = block["kind"]
    horizon = block["horizon"]

    def means():
        if block["means"] is None:
            raise ConfigError(f"{kind} outflows need 'means'", "outflow.means")
        m = block["means"]
        if len(m) == 1 and K > 1:
            m = m * K
        if len(m) != K:
            raise ConfigError(f"expected {K} means, got {len(m)}", "outflow.means")
        return m

    if kind == "exponential":
        return ExponentialOutflow(means(), horizon)
    if kind == "poisson":
        return PoissonOutflow(means(), horizon)
    if kind == "pareto":
        if block["tail_index"] is None:
            raise ConfigError("pareto outflows need 'tail_index'", "outflow.tail_index")
        return ParetoOutflow(means(), block["tail_index"], horizon)
    if kind == "factor":
        if block["alpha"] is None:
            raise ConfigError("factor outflows need 'alpha'", "outflow.alpha")
        return FactorOutflow(means(), block["alpha"], horizon, block["common_mean"])
    if kind == "empirical":
        if block["path"] is None:
            raise ConfigError("empirical outflows need 'path'", "outflow.path")
        path = Path(block["path"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"file not found: {path}", "outflow.path")
        return load_empirical(path, K, horizon)
    guess = difflib.get_close_matches(kind, ["exponential", "pareto", "poisson", "factor", "empirical"], n=1)
    hint = f"; did you mean {guess[0]!r}?" if guess else ""
    raise ConfigError(f"unknown outflow kind {kind!r}{hint}", "outflow.kind")


def build_config(data: dict, base_dir: Path, text: str | None = None) -> RunConfig:
    defaults = []
    raw = _validate(data, SCHEMA, [], text or "", defaults)
    m = raw["market"]
    try:
        spec = MarketSpec(m["h"], m["f"], tuple(m["r"]), m["lambda_u"], m["lambda_o"], m["S"], tuple(m["Q"]))
    except DomainError as exc:
        raise ConfigError(str(exc), "market", _locate(text, ["market"]) if text else None) from None
    violations = validate_assumptions(spec)
    if violations:
        raise ConfigError("; ".join(str(v) for v in violations), "market",
                          _locate(text, ["market"]) if text else None)
    try:
        model = build_model(raw["outflow"], spec.K, base_dir)
    except DomainError as exc:
        raise ConfigError(str(exc), "outflow", _locate(text, ["outflow"]) if text else None) from None
    s = raw["solver"]
    if s["method"] not in ("analytic", "sa"):
        raise ConfigError(f"unknown method {s['method']!r}; use 'analytic' or 'sa'", "solver.method")
    if s["projection"] not in PROJECTIONS:
        raise ConfigError(f"unknown projection {s['projection']!r}; choose from {', '.join(PROJECTIONS)}",
                          "solver.projection")
    try:
        X0 = None if s["X0"] is None else Allocation.from_dict(s["X0"])
        if X0 is not None and X0.K != spec.K:
            raise DomainError(f"X0 has {X0.K} limit sizes, market has K={spec.K}")
        sa = SAConfig(s["iterations"], X0, s["step"], s["burn_in_fraction"], s["projection"], raw["seed"],
                      s["eval_count"], s["trace_every"])
    except DomainError as exc:
        raise ConfigError(str(exc), "solver", _locate(text, ["solver"]) if text else None) from None
    if raw["workers"] < 1:
        raise ConfigError("workers must be at least 1", "workers")
    return RunConfig(spec, model, sa, raw, raw["seed"], raw["workers"], raw["output"]["dir"], defaults, base_dir)


def parse_config(path) -> RunConfig:
    """Read, validate and resolve a JSON run configuration."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    # parse errors from an empirical data file propagate with their own line numbers
    return build_config(data, path.parent.resolve(), text)
