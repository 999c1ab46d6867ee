"""Out-of-sample evaluation, benchmark strategies and the experiment drivers.

Every driver returns a list of flat row dicts whose keys match the CSV header
constant next to it, so tables can be written with :func:`write_csv`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analytic import solve_single
from .errors import DomainError, OrderPlacementError
from .market import Allocation, MarketSpec, _vector, costs, total_filled
from .outflows import (
    EmpiricalOutflow,
    ExponentialOutflow,
    FactorOutflow,
    OutflowModel,
    ParetoOutflow,
    PoissonOutflow,
    make_rng,
    stream,
)
from .parallel import pmap
from .sa import SAConfig, equal_split, solve_sa
from .verification import brute_force_solve

Z95 = 1.959963984540054


@dataclass(frozen=True)
class EvaluationResult:
    """Average cost per share W(X) on a batch, with a normal-approximation 95% CI."""

    label: str
    avg_cost_per_share: float
    ci95_halfwidth: float
    avg_filled: float
    count: int
    se: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate_on(X, spec: MarketSpec, draws: np.ndarray, label: str = "X") -> EvaluationResult:
    x = _vector(X, spec.K)
    per = costs(x, draws, spec) / spec.S
    n = per.size
    sd = float(per.std(ddof=1)) if n > 1 else 0.0
    se = sd / math.sqrt(n)
    filled = total_filled(x, draws, spec)
    return EvaluationResult(label, float(per.mean()), Z95 * se, float(np.mean(filled)), int(n), se)


def evaluate(X, spec: MarketSpec, model: OutflowModel, count: int = 10_000, seed: int = 0, label: str = "X") -> EvaluationResult:
    """W(X) = (1/(count S)) sum_n v(X, xi_n) on a fresh batch from the evaluation stream."""
    if count < 2:
        raise DomainError(f"evaluation needs at least 2 draws, got {count}")
    draws = model.draw(make_rng(stream(seed, "evaluate")), int(count))
    return evaluate_on(X, spec, draws, label)


def benchmark_allocations(spec: MarketSpec) -> dict:
    """Pure market X_M, single limit order X_L and equal split X_E."""
    K, S = spec.K, spec.S
    return {
        "X_M": Allocation(S, (0.0,) * K),
        "X_L": Allocation(0.0, (S,) + (0.0,) * (K - 1)),
        "X_E": equal_split(spec),
    }


def _paired_gap(x_hat, x_ref, spec, draws):
    a = costs(x_hat, draws, spec) / spec.S
    b = costs(x_ref, draws, spec) / spec.S
    ref = float(b.mean())
    d = a - b
    scale = abs(ref) if ref != 0 else 1.0
    return float(a.mean()), ref, float(d.mean()) / scale, float(d.std(ddof=1) / math.sqrt(d.size)) / scale


def reference_solution(spec: MarketSpec, model: OutflowModel, seed: int = 0) -> Allocation:
    """Analytic optimum for one venue, brute-force lattice optimum otherwise."""
    if spec.K == 1:
        return solve_single(spec, model).allocation
    return brute_force_solve(spec, model, step=spec.S / 100, count=20_000, seed=seed).allocation


CONVERGENCE_HEADER = ["x0", "N", "seed", "M_hat", "L_hat", "objective", "reference_objective", "gap", "gap_se"]


def _convergence_task(args):
    spec, model, label, X0, N, seed, projection, draws, ref = args
    rep = solve_sa(spec, model, SAConfig(iterations=N, X0=X0, seed=seed, projection=projection), eval_draws=draws[:2])
    obj, ref_obj, gap, gap_se = _paired_gap(rep.X_hat, ref, spec, draws)
    return {
        "x0": label,
        "N": N,
        "seed": seed,
        "M_hat": rep.X_hat.M,
        "L_hat": " ".join(repr(v) for v in rep.X_hat.L),
        "objective": obj,
        "reference_objective": ref_obj,
        "gap": gap,
        "gap_se": gap_se,
    }


def run_convergence_study(spec: MarketSpec, model: OutflowModel, X0s: dict, N_grid, seeds=(0,),
                          eval_count: int = 10_000, root_seed: int = 0, reference: Allocation | None = None,
                          projection: str = "truncate", workers: int = 1) -> list:
    """Relative objective gap of the averaged iterate per starting point, N and seed.

    All rows are scored on one held-out batch shared with the reference solution.
    """
    if reference is None:
        reference = reference_solution(spec, model, root_seed)
    draws = model.draw(make_rng(stream(root_seed, "convergence", "evaluation")), eval_count)
    tasks = [
        (spec, model, label, X0, int(N), int(stream(root_seed, "convergence", s).generate_state(1)[0]), projection, draws, reference)
        for label, X0 in X0s.items() for N in N_grid for s in seeds
    ]
    return pmap(_convergence_task, tasks, workers)


SWEEP_PARAMETERS = ("lambda_u", "lambda_o", "h", "f", "r_k", "Q_k", "mu_k", "S", "alpha")


def _with_means(model, means):
    if isinstance(model, FactorOutflow):
        return FactorOutflow(means, model.alpha, model.horizon, model.common_mean)
    if isinstance(model, ParetoOutflow):
        return ParetoOutflow(means, model.tail_index, model.horizon)
    if isinstance(model, (ExponentialOutflow, PoissonOutflow)):
        return type(model)(means, model.horizon)
    raise DomainError(f"cannot vary the means of a {model.kind} model")


def apply_parameter(spec: MarketSpec, model: OutflowModel, name: str, value: float):
    """(spec, model) with one named parameter replaced; venue-indexed names look like ``Q_1``."""
    if name in ("lambda_u", "lambda_o", "h", "f", "S"):
        return spec.replace(**{name: value}), model
    if name == "alpha":
        if not isinstance(model, FactorOutflow):
            raise DomainError("alpha sweeps need a factor model")
        return spec, FactorOutflow(model.means, value, model.horizon, model.common_mean)
    base, _, idx = name.partition("_")
    if base in ("r", "Q", "mu") and idx.isdigit():
        k = int(idx) - 1
        if not 0 <= k < spec.K:
            raise DomainError(f"venue index in {name!r} out of range for K={spec.K}")
        if base == "mu":
            means = list(model.means)
            means[k] = value
            return spec, _with_means(model, means)
        values = list(getattr(spec, base))
        values[k] = value
        return spec.replace(**{base: tuple(values)}), model
    raise DomainError(f"unknown sweep parameter {name!r}; choose from {SWEEP_PARAMETERS} with k a venue number")


def sweep_header(K: int) -> list:
    return ["parameter", "value", "M_hat"] + [f"L{k}_hat" for k in range(1, K + 1)] + ["objective", "M_single", "L_single"]


def _sweep_task(args):
    spec, model, name, value, cfg = args
    s, m = apply_parameter(spec, model, name, value)
    rep = solve_sa(s, m, cfg)
    row = {"parameter": name, "value": value, "M_hat": rep.X_hat.M}
    for k, L in enumerate(rep.X_hat.L, start=1):
        row[f"L{k}_hat"] = L
    row["objective"] = rep.objective_estimate
    try:
        single = solve_single(s.venue(0), m.marginal(0))
        row["M_single"], row["L_single"] = single.M_star, single.L_star
    except OrderPlacementError:
        row["M_single"], row["L_single"] = math.nan, math.nan
    return row


def run_sensitivity_sweep(spec: MarketSpec, model: OutflowModel, parameter: str, grid, cfg: SAConfig | None = None,
                          workers: int = 1) -> list:
    """Re-solve across a one-parameter grid with the same seed at every point.

    The single-venue closed-form solution on venue 1 is added as a comparison series.
    """
    cfg = cfg or SAConfig()
    return pmap(_sweep_task, [(spec, model, parameter, float(v), cfg) for v in grid], workers)


FRAGMENTATION_HEADER = [
    "alpha", "M_hat", "L1_hat", "L2_hat", "total", "W_fragmented", "ci_fragmented",
    "M_consolidated", "L_consolidated", "W_consolidated", "ci_consolidated",
]


def consolidated_spec(spec: MarketSpec) -> MarketSpec:
    """The single venue with summed queues; venues must share a rebate."""
    if len(set(spec.r)) != 1:
        raise DomainError("consolidation needs identical rebates across venues")
    return spec.replace(r=(spec.r[0],), Q=(float(sum(spec.Q)),))


def _fragmentation_task(args):
    spec, mu, alpha, horizon, cfg, eval_count, root_seed = args
    model = FactorOutflow((mu,) * spec.K, alpha, horizon)
    draws = model.draw(make_rng(stream(root_seed, "fragmentation", "evaluation")), eval_count)
    rep = solve_sa(spec, model, cfg, eval_draws=draws[:2])
    frag = evaluate_on(rep.X_hat, spec, draws, "fragmented")
    cspec = consolidated_spec(spec)
    single = solve_single(cspec, model.consolidated())
    cons = evaluate_on(single.allocation, cspec, draws.sum(axis=1, keepdims=True), "consolidated")
    return {
        "alpha": alpha,
        "M_hat": rep.X_hat.M,
        "L1_hat": rep.X_hat.L[0],
        "L2_hat": rep.X_hat.L[1],
        "total": rep.X_hat.total,
        "W_fragmented": frag.avg_cost_per_share,
        "ci_fragmented": frag.ci95_halfwidth,
        "M_consolidated": single.M_star,
        "L_consolidated": single.L_star,
        "W_consolidated": cons.avg_cost_per_share,
        "ci_consolidated": cons.ci95_halfwidth,
    }


def run_fragmentation_study(spec: MarketSpec, mu: float, alpha_grid, cfg: SAConfig | None = None,
                            eval_count: int = 10_000, root_seed: int = 0, horizon: float = 1.0,
                            workers: int = 1) -> list:
    """Two correlated venues versus one consolidated venue, across factor weights.

    The consolidated venue has queue Q_1 + Q_2 and outflow xi_1 + xi_2 and is
    solved in closed form; both are scored on the same outflow draws.
    """
    if spec.K != 2:
        raise DomainError("fragmentation study needs K=2")
    cfg = cfg or SAConfig()
    tasks = [(spec, mu, float(a), horizon, cfg, eval_count, root_seed) for a in alpha_grid]
    return pmap(_fragmentation_task, tasks, workers)


def benchmark_header(K_max: int) -> list:
    return (
        ["K", "S", "M_frac"]
        + [f"L{k}_frac" for k in range(1, K_max + 1)]
        + ["W_XM", "W_XL", "W_XE", "W_Xhat", "ci_XM", "ci_XL", "ci_XE", "ci_Xhat"]
    )


def _benchmark_task(args):
    template, K, S, alpha, mu, Q, horizon, N, eval_count, root_seed, K_max = args
    spec = template.replace(S=S, r=(template.r[0],) * K, Q=(Q,) * K)
    model = FactorOutflow((mu,) * K, alpha, horizon)
    draws = model.draw(make_rng(stream(root_seed, "benchmark", K, int(S), "evaluation")), eval_count)
    X0 = equal_split(spec)
    seed = int(stream(root_seed, "benchmark", K, int(S), "solver").generate_state(1)[0])
    rep = solve_sa(spec, model, SAConfig(iterations=N, X0=X0, seed=seed), eval_draws=draws[:2])
    row = {"K": K, "S": S, "M_frac": rep.X_hat.M / S}
    for k in range(1, K_max + 1):
        row[f"L{k}_frac"] = rep.X_hat.L[k - 1] / S if k <= K else math.nan
    results = {name: evaluate_on(X, spec, draws, name) for name, X in benchmark_allocations(spec).items()}
    results["X_hat"] = evaluate_on(rep.X_hat, spec, draws, "X_hat")
    for name, col in (("X_M", "XM"), ("X_L", "XL"), ("X_E", "XE"), ("X_hat", "Xhat")):
        row[f"W_{col}"] = results[name].avg_cost_per_share
        row[f"ci_{col}"] = results[name].ci95_halfwidth
    return row


def run_benchmark_table(template: MarketSpec, K_list, S_list, alpha: float = 0.6, mu: float = 2200.0,
                        Q: float = 2000.0, horizon: float = 1.0, N: int = 1000, eval_count: int = 1000,
                        root_seed: int = 0, workers: int = 1) -> list:
    """Identical venues under the factor model: solution fractions and W for four strategies.

    Each (K, S) cell starts from the equal split and scores X_M, X_L, X_E and the
    averaged iterate on one common fresh batch.
    """
    K_max = max(K_list)
    tasks = [
        (template, int(K), float(S), alpha, mu, Q, horizon, N, eval_count, root_seed, K_max)
        for S in S_list for K in K_list
    ]
    return pmap(_benchmark_task, tasks, workers)


TERCILES = ("low", "medium", "high")


@dataclass
class BucketSolution:
    key: tuple
    rows: int
    Q: tuple
    allocation: Allocation | None
    objective: float | None
    flagged: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "key": list(self.key),
            "rows": self.rows,
            "Q": list(self.Q),
            "allocation": None if self.allocation is None else self.allocation.to_dict(),
            "objective": self.objective,
            "flagged": self.flagged,
            "note": self.note,
        }


@dataclass
class BucketTable:
    features: list
    boundaries: dict
    buckets: dict = field(default_factory=dict)

    def lookup(self, values: dict) -> BucketSolution | None:
        key = tuple(tercile_index(values[f], self.boundaries[f]) for f in self.features)
        return self.buckets.get(key)


def tercile_boundaries(values) -> tuple:
    lo, hi = np.quantile(np.asarray(values, dtype=float), [1 / 3, 2 / 3])
    return float(lo), float(hi)


def tercile_index(value, bounds):
    """0, 1 or 2: the number of tercile boundaries strictly below ``value``."""
    v = np.asarray(value, dtype=float)
    out = (v > bounds[0]).astype(int) + (v > bounds[1]).astype(int)
    return int(out) if out.ndim == 0 else out


def _bucket_task(args):
    key, spec, sub, cfg, min_rows = args
    if sub.n_rows < min_rows:
        return BucketSolution(key, sub.n_rows, spec.Q, None, None, True, f"fewer than {min_rows} rows")
    rep = solve_sa(spec, sub, cfg)
    return BucketSolution(key, sub.n_rows, spec.Q, rep.X_hat, rep.objective_estimate, False)


def bucket_and_solve(model: EmpiricalOutflow, template: MarketSpec, cfg: SAConfig | None = None,
                     features=None, min_rows: int = 3, workers: int = 1) -> BucketTable:
    """Split training rows by feature terciles and solve one problem per bucket.

    Boundaries are the 1/3 and 2/3 sample quantiles of each feature on the full
    set. When ``q_k`` columns exist, a bucket's queue sizes are their medians
    within the bucket. Buckets with fewer than ``min_rows`` rows are flagged and
    left unsolved.
    """
    cfg = cfg or SAConfig()
    if features is None:
        features = sorted(model.features)
    if not features:
        raise DomainError("bucketing needs at least one feature column")
    missing = [f for f in features if f not in model.features]
    if missing:
        raise DomainError(f"unknown feature columns {missing}; available {sorted(model.features)}")
    bounds = {f: tercile_boundaries(model.features[f]) for f in features}
    idx = np.stack([tercile_index(model.features[f], bounds[f]) for f in features], axis=1)
    keys = sorted({tuple(int(v) for v in row) for row in idx})
    tasks = []
    for key in keys:
        mask = np.all(idx == np.array(key), axis=1)
        sub = model.subset(mask)
        Q = list(template.Q)
        for k in range(template.K):
            col = f"q_{k + 1}"
            if col in sub.features:
                Q[k] = float(np.median(sub.features[col]))
        tasks.append((key, template.replace(Q=tuple(Q)), sub, cfg, min_rows))
    table = BucketTable(list(features), bounds)
    for sol in pmap(_bucket_task, tasks, workers):
        table.buckets[sol.key] = sol
    return table


BUCKET_HEADER_BASE = ["bucket", "rows", "flagged", "M_hat"]


def bucket_rows(table: BucketTable, K: int) -> list:
    rows = []
    for key in sorted(table.buckets):
        sol = table.buckets[key]
        row = {"bucket": "-".join(f"{f}:{TERCILES[i]}" for f, i in zip(table.features, key)),
               "rows": sol.rows, "flagged": sol.flagged,
               "M_hat": sol.allocation.M if sol.allocation else math.nan}
        for k in range(K):
            row[f"L{k + 1}_hat"] = sol.allocation.L[k] if sol.allocation else math.nan
        for k in range(K):
            row[f"Q{k + 1}"] = sol.Q[k]
        row["objective"] = sol.objective if sol.objective is not None else math.nan
        rows.append(row)
    return rows


def bucket_header(K: int) -> list:
    return BUCKET_HEADER_BASE + [f"L{k}_hat" for k in range(1, K + 1)] + [f"Q{k}" for k in range(1, K + 1)] + ["objective"]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, rows: list, header: list) -> None:
    """Write rows with a fixed header; floats use repr so files are byte-stable."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row.get(col, "")) for col in header])
