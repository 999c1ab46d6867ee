"""Monte-Carlo optimality checks, the penalty dual, and a lattice brute-force oracle."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .market import Allocation, MarketSpec, Violation, _vector, costs, feasible_set_contains
from .outflows import OutflowModel, exceeds_with_positive_probability, make_rng, stream
from .parallel import partitions, pmap
from .sa import SAConfig, solve_sa

LOW_CONFIDENCE_EVENTS = 50


def shortfall_target(spec: MarketSpec) -> float:
    """Optimal P(A < S) at an interior optimum: (h + f + lambda_o)/(lambda_u + lambda_o)."""
    return (spec.h + spec.f + spec.lambda_o) / (spec.lambda_u + spec.lambda_o)


def conditional_target(spec: MarketSpec, j: int) -> float:
    """Optimal P(A < S | venue j fully filled): (lambda_o - h - r_j)/(lambda_u + lambda_o)."""
    return (spec.lambda_o - (spec.h + spec.r[j])) / (spec.lambda_u + spec.lambda_o)


def _binomial_se(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n) if n > 0 else math.nan


def _kkt_counts(args):
    model, spec, x, seed, index, n = args
    xi = model.draw(make_rng(stream(seed, "kkt", index)), n)
    Q = np.asarray(spec.Q)
    L = x[1:]
    A = x[0] + np.minimum(np.maximum(xi - Q, 0.0), L).sum(axis=1)
    under = A < spec.S
    full = xi > Q + L
    touched = xi > Q
    none_touched = ~touched
    others_untouched = np.stack(
        [np.all(np.delete(none_touched, j, axis=1), axis=1) for j in range(spec.K)], axis=1
    )
    return {
        "n": n,
        "under": int(under.sum()),
        "over": int((A > spec.S).sum()),
        "full": full.sum(axis=0).astype(int),
        "under_full": (full & under[:, None]).sum(axis=0).astype(int),
        "p0": int(np.all(none_touched, axis=1).sum()),
        "touched": touched.sum(axis=0).astype(int),
        "touched_alone": (touched & others_untouched).sum(axis=0).astype(int),
    }


@dataclass
class KKTReport:
    """Shortfall probabilities at X against their optimality targets.

    Standard errors are binomial, evaluated at the target probability. Conditional
    estimates from fewer than 50 conditioning draws are marked low-confidence and
    those with none are ``None``.
    """

    count: int
    shortfall_prob_hat: float
    overfill_prob_hat: float
    target_shortfall: float
    shortfall_se: float
    shortfall_residual: float
    conditional_shortfall_hat: list
    target_conditional: list
    conditional_se: list
    conditional_residuals: list
    conditioning_events: list
    low_confidence: list
    p0_hat: float
    pj_hat: list
    condition8_holds: bool
    condition9_holds: list
    in_C: bool
    notes: list = field(default_factory=list)

    def residuals_within(self, n_se: float = 3.0) -> bool:
        ok = self.shortfall_residual <= n_se * self.shortfall_se
        for res, se in zip(self.conditional_residuals, self.conditional_se):
            if res is not None:
                ok = ok and res <= n_se * se
        return bool(ok)

    def failures(self, n_se: float = 3.0) -> list:
        out = []
        if not self.shortfall_residual <= n_se * self.shortfall_se:
            out.append(("shortfall", self.shortfall_residual / self.shortfall_se))
        for j, (res, se) in enumerate(zip(self.conditional_residuals, self.conditional_se)):
            if res is not None and not res <= n_se * se:
                out.append((f"conditional_{j + 1}", res / se))
        return out

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "KKTReport":
        return cls(**data)


def estimate_kkt(X, spec: MarketSpec, model: OutflowModel, count: int = 100_000, seed: int = 0, workers: int = 1) -> KKTReport:
    """Estimate P(A<S), P(A<S | xi_j > Q_j+L_j), p_0 and p_j at X by simulation."""
    if count < 1000:
        raise DomainError(f"KKT estimation needs at least 1000 draws, got {count}")
    x = _vector(X, spec.K)
    in_C = feasible_set_contains(x, spec, tol=1e-9 * spec.S)
    notes = []
    if not in_C:
        warnings.warn("allocation lies outside the feasible set C", stacklevel=2)
        notes.append("allocation lies outside C")
    parts = pmap(_kkt_counts, [(model, spec, x, seed, i, n) for i, n in partitions(count)], workers)
    tot = {k: sum(p[k] for p in parts) for k in parts[0]}
    n = tot["n"]
    t0 = shortfall_target(spec)
    p_under = tot["under"] / n
    se0 = _binomial_se(t0, n)
    cond_hat, cond_t, cond_se, cond_res, low = [], [], [], [], []
    for j in range(spec.K):
        m = int(tot["full"][j])
        tj = conditional_target(spec, j)
        cond_t.append(tj)
        low.append(m < LOW_CONFIDENCE_EVENTS)
        if m == 0:
            cond_hat.append(None)
            cond_se.append(None)
            cond_res.append(None)
            notes.append(f"venue {j + 1}: no full fills observed; conditional shortfall undefined")
            continue
        est = int(tot["under_full"][j]) / m
        cond_hat.append(est)
        cond_se.append(_binomial_se(tj, m))
        cond_res.append(abs(est - tj))
        if m < LOW_CONFIDENCE_EVENTS:
            notes.append(f"venue {j + 1}: only {m} full fills; conditional estimate is low-confidence")
    p0 = tot["p0"] / n
    pj = [
        (int(tot["touched_alone"][j]) / int(tot["touched"][j])) if tot["touched"][j] else None
        for j in range(spec.K)
    ]
    rmax = max(spec.r)
    cond8 = bool(p0 > 0 and spec.lambda_u >= (2 * spec.h + spec.f + rmax) / p0 - (spec.h + rmax))
    cond9 = [bool(p is not None and p > conditional_target(spec, j)) for j, p in enumerate(pj)]
    for j in range(spec.K):
        if cond9[j] and x[1 + j] == 0:
            notes.append(f"L_{j + 1}=0 cannot be optimal: p_{j + 1} exceeds its threshold")
    if cond8 and x[0] == 0:
        notes.append("M=0 cannot be optimal: p_0 satisfies the market-order condition")
    return KKTReport(
        count=n,
        shortfall_prob_hat=p_under,
        overfill_prob_hat=tot["over"] / n,
        target_shortfall=t0,
        shortfall_se=se0,
        shortfall_residual=abs(p_under - t0),
        conditional_shortfall_hat=cond_hat,
        target_conditional=cond_t,
        conditional_se=cond_se,
        conditional_residuals=cond_res,
        conditioning_events=[int(v) for v in tot["full"]],
        low_confidence=low,
        p0_hat=p0,
        pj_hat=pj,
        condition8_holds=cond8,
        condition9_holds=cond9,
        in_C=bool(in_C),
        notes=notes,
    )


def check_prop4_preconditions(spec: MarketSpec, model: OutflowModel) -> list:
    """Violations of the two hypotheses under which the first-order conditions characterize X*."""
    out = []
    # F < 1 is decided from the support so thin tails do not round to 1
    for k in range(spec.K):
        if not exceeds_with_positive_probability(model, k, spec.Q[k] + spec.S):
            out.append(Violation("fill-tail", f"F_{k + 1}(Q_{k + 1}+S) = 1; need max_k F_k(Q_k+S) < 1"))
    caps = []
    for k in range(spec.K):
        FQ = model.cdf(k, spec.Q[k])
        c = 2 * spec.h + spec.f + spec.r[k]
        caps.append(math.inf if FQ <= 0 else c / FQ - (spec.h + spec.r[k]))
    if not spec.lambda_u < max(caps):
        out.append(Violation("penalty-cap", f"lambda_u = {spec.lambda_u} must be < {max(caps):.6g}"))
    return out


def overfill_predicate_two(X, xi, spec: MarketSpec):
    """The three-inequality description of {A > S} for two venues and X interior to C."""
    if spec.K != 2:
        raise DomainError("overfill predicate is defined for K=2")
    M, L1, L2 = _vector(X, 2)
    xi = np.asarray(xi, dtype=float)
    Q1, Q2 = spec.Q
    S = spec.S
    x1, x2 = xi[..., 0], xi[..., 1]
    out = (x1 > Q1 + S - M - L2) & (x2 > Q2 + S - M - L1) & (x1 + x2 > Q1 + Q2 + S - M)
    return bool(out) if np.ndim(out) == 0 else out


@dataclass
class DualReport:
    lambda_u_star: float
    lambda_o_star: float
    X_star: Allocation
    achieved_shortfall_u: float
    achieved_overflow_o: float
    shortfall_se: float
    overflow_se: float
    dual_value: float
    mu_u: float
    mu_o: float
    infeasible: bool
    evaluations: int
    grid_u: list = field(default_factory=list)
    grid_o: list = field(default_factory=list)
    status: str = "ok"

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["X_star"] = self.X_star.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "DualReport":
        data = dict(data)
        data["X_star"] = Allocation.from_dict(data["X_star"])
        return cls(**data)


def dual_grids(spec: MarketSpec, points: int = 25):
    """Log-spaced search grids for (lambda_u, lambda_o)."""
    hf = spec.h + spec.f
    if not hf > 0:
        raise DomainError("dual search range needs h + f > 0")
    a2 = max(spec.h + max(spec.r), -hf, 0.0)
    lo_min = a2 + 1e-6 * hf if a2 > 0 else 1e-2 * hf
    grid_o = np.geomspace(lo_min, 1e3 * hf, points)
    grid_u = np.geomspace(1e-2 * hf, 1e3 * hf, points)
    return grid_u, grid_o


def solve_constrained(spec: MarketSpec, mu_u: float, mu_o: float, model: OutflowModel,
                      cfg: SAConfig | None = None, grid_points: int = 25, passes: int = 2,
                      eval_count: int = 10_000) -> DualReport:
    """Maximize phi(l) = V*(l) - l_u mu_u - l_o mu_o over penalty prices.

    ``spec``'s own penalties are ignored. V* comes from the stochastic
    approximation solver with fixed seeds (common random numbers across the
    grid) and is scored on one shared batch. An argmax on the upper edge of a
    grid means the constraint level is not attainable within the searched range.
    """
    if not (mu_u > 0 and mu_o > 0):
        raise DomainError("constraint levels mu_u and mu_o must be positive")
    cfg = cfg or SAConfig()
    grid_u, grid_o = dual_grids(spec, grid_points)
    batch = model.draw(make_rng(stream(cfg.seed, "dual", "evaluation")), eval_count)
    cache = {}

    def phi(iu, io):
        key = (iu, io)
        if key not in cache:
            s = spec.replace(lambda_u=float(grid_u[iu]), lambda_o=float(grid_o[io]))
            rep = solve_sa(s, model, cfg, eval_draws=batch)
            value = float(costs(rep.X_hat, batch, s).mean())
            cache[key] = (value - s.lambda_u * mu_u - s.lambda_o * mu_o, rep.X_hat)
        return cache[key][0]

    iu, io = 0, 0
    for _ in range(passes):
        iu = max(range(len(grid_u)), key=lambda i: (phi(i, io), -i))
        io = max(range(len(grid_o)), key=lambda i: (phi(iu, i), -i))
    best, X = cache[(iu, io)]
    A = X.M + np.minimum(np.maximum(batch - np.asarray(spec.Q), 0.0), np.asarray(X.L)).sum(axis=1)
    short = np.maximum(spec.S - A, 0.0)
    over = np.maximum(A - spec.S, 0.0)
    n = batch.shape[0]
    infeasible = iu == len(grid_u) - 1 or io == len(grid_o) - 1
    status = "ok"
    if infeasible:
        status = "constraint level not attained on the searched penalty range"
    return DualReport(
        lambda_u_star=float(grid_u[iu]),
        lambda_o_star=float(grid_o[io]),
        X_star=X,
        achieved_shortfall_u=float(short.mean()),
        achieved_overflow_o=float(over.mean()),
        shortfall_se=float(short.std(ddof=1) / math.sqrt(n)),
        overflow_se=float(over.std(ddof=1) / math.sqrt(n)),
        dual_value=float(best),
        mu_u=float(mu_u),
        mu_o=float(mu_o),
        infeasible=bool(infeasible),
        evaluations=len(cache),
        grid_u=[float(v) for v in grid_u],
        grid_o=[float(v) for v in grid_o],
        status=status,
    )


@dataclass
class BruteForceResult:
    allocation: Allocation
    objective: float
    objective_se: float
    grid_step: float
    evaluations: int
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["allocation"] = self.allocation.to_dict()
        return d


def _lattice(center, radius, step, S, K):
    axes = []
    for c in center:
        lo = max(0.0, math.floor((c - radius) / step) * step)
        hi = min(S, math.ceil((c + radius) / step) * step)
        up = np.arange(lo, hi + step / 2, step)
        # mirror from S so that complementary sizes such as (M, S - M) are both present
        down = S - up
        axis = np.concatenate([up, down[(down >= max(c - radius, 0.0) - 1e-9) & (down <= min(c + radius, S) + 1e-9)]])
        axes.append(np.unique(np.round(axis, 9)))
    for pt in itertools.product(*axes):
        x = np.array(pt)
        if x[0] <= S and np.all(x[1:] <= S - x[0] + 1e-9) and x.sum() >= S - 1e-9:
            yield x


def brute_force_solve(spec: MarketSpec, model: OutflowModel, step: float = 10.0, count: int = 100_000,
                      seed: int = 0, draws=None) -> BruteForceResult:
    """Minimize the batch-average cost over a lattice in C with common random numbers.

    The search starts on a coarse lattice over all of C, refines around the
    incumbent, and finishes with a neighbour search on the lattice of spacing
    ``step``. The batch average need not be convex once overfilling is
    possible, so the result is a lattice local minimum found from a global
    coarse scan.
    """
    K = spec.K
    if K > 3:
        raise DomainError(f"lattice search supports K <= 3, got K={K}")
    S = spec.S
    notes = []
    if step > S / 4:
        notes.append(f"grid step {step} is coarse relative to S={S}; the minimizer may be poorly bracketed")
    if draws is None:
        draws = model.draw(make_rng(stream(seed, "brute-force")), count)
    values = {}

    def f(x):
        key = tuple(np.round(x, 9))
        if key not in values:
            values[key] = float(costs(x, draws, spec).mean())
        return values[key]

    levels = [step]
    while levels[-1] * 2.5 < S / 4:
        levels.append(levels[-1] * 2.5)
    levels = levels[::-1]
    best = None
    radius = S
    for h in levels:
        center = np.full(K + 1, S / 2) if best is None else best
        pts = list(_lattice(center, radius, h, S, K))
        if best is not None:
            pts.append(best)
        best = min(pts, key=f)
        radius = 1.5 * h
    # local neighbour search on the finest lattice
    moves = [np.array(d) * step for d in itertools.product((-1, 0, 1), repeat=K + 1) if any(d)]
    improved = True
    while improved:
        improved = False
        for d in moves:
            y = best + d
            if np.all(y >= -1e-9) and feasible_set_contains(np.maximum(y, 0), spec, tol=1e-9) and f(y) < f(best):
                best, improved = np.maximum(y, 0), True
    per = costs(best, draws, spec) / S
    return BruteForceResult(
        Allocation.from_array(best),
        float(per.mean()),
        float(per.std(ddof=1) / math.sqrt(per.size)),
        float(step),
        len(values),
        notes,
    )
