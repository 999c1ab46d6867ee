"""Closed-form single-venue solution and the semi-analytic two-venue solver."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from .errors import DomainError, PreconditionError, RootNotFoundError
from .market import Allocation, MarketSpec, Violation, validate_assumptions
from .outflows import OutflowModel, exceeds_with_positive_probability

REGIME_TOL = 1e-12

ALL_LIMIT = "all-limit"
INTERIOR = "interior"
ALL_MARKET = "all-market"


def _require_assumptions(spec: MarketSpec):
    violations = validate_assumptions(spec)
    if violations:
        raise PreconditionError(
            "market assumptions violated: " + "; ".join(str(v) for v in violations), violations
        )


def _ratio_minus(num: float, den: float, shift: float) -> float:
    # num/den - shift with den == 0 read as an infinite threshold
    return math.inf if den <= 0 else num / den - shift


@dataclass(frozen=True)
class SingleExchangeSolution:
    M_star: float
    L_star: float
    regime: str
    lambda_lower: float
    lambda_upper: float
    quantile_level: float | None = None

    @property
    def allocation(self) -> Allocation:
        return Allocation(self.M_star, (self.L_star,))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SingleExchangeSolution":
        return cls(**data)


def single_thresholds(spec: MarketSpec, model: OutflowModel, k: int = 0):
    """Penalty levels below/above which only limit/market orders are optimal on venue ``k``."""
    h, f, r = spec.h, spec.f, spec.r[k]
    c = 2 * h + f + r
    lower = _ratio_minus(c, model.cdf(k, spec.Q[k] + spec.S), h + r)
    upper = _ratio_minus(c, model.cdf(k, spec.Q[k]), h + r)
    return lower, upper


def solve_single(spec: MarketSpec, model: OutflowModel) -> SingleExchangeSolution:
    """Optimal market/limit split on one venue.

    ``L* = F^{-1}((2h+f+r)/(lambda_u+h+r)) - Q`` with the generalized inverse, so
    the solution also applies to discrete outflows. Penalties at or beyond the
    two thresholds select the all-limit or all-market corner.
    """
    if spec.K != 1 or model.K != 1:
        raise DomainError(f"single-exchange solver needs K=1 (spec K={spec.K}, model K={model.K})")
    _require_assumptions(spec)
    h, f, r, lu, S, Q = spec.h, spec.f, spec.r[0], spec.lambda_u, spec.S, spec.Q[0]
    lower, upper = single_thresholds(spec, model)
    if lu <= lower + REGIME_TOL * abs(lower):
        return SingleExchangeSolution(0.0, S, ALL_LIMIT, lower, upper)
    if lu >= upper - REGIME_TOL * abs(upper):
        return SingleExchangeSolution(S, 0.0, ALL_MARKET, lower, upper)
    p = (2 * h + f + r) / (lu + h + r)
    L = min(max(model.quantile(0, p) - Q, 0.0), S)
    return SingleExchangeSolution(S - L, L, INTERIOR, lower, upper, p)


@dataclass(frozen=True)
class TwoExchangeSolution:
    M_star: float
    L1_star: float
    L2_star: float
    root_residual: float
    integral_abs_error: float
    bisection_steps: int = 0
    advisories: tuple = field(default=())

    @property
    def allocation(self) -> Allocation:
        return Allocation(self.M_star, (self.L1_star, self.L2_star))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["advisories"] = list(self.advisories)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TwoExchangeSolution":
        data = dict(data)
        data["advisories"] = tuple(data.get("advisories", ()))
        return cls(**data)


def _corollary_checks(spec: MarketSpec, model: OutflowModel):
    """(violation, blocking) pairs for the three two-venue existence conditions."""
    h, f, r, lu, lo, S, Q = spec.h, spec.f, spec.r, spec.lambda_u, spec.lambda_o, spec.S, spec.Q
    F_Q = [model.cdf(k, Q[k]) for k in range(2)]
    # F < 1 is decided from the support so thin tails do not round to 1
    out = []
    for k in range(2):
        if not exceeds_with_positive_probability(model, k, Q[k] + S):
            out.append((Violation("condition 1", f"F_{k + 1}(Q_{k + 1}+S) = 1; need max_k F_k(Q_k+S) < 1"), True))
    upper = max(_ratio_minus(2 * h + f + r[k], F_Q[k], h + r[k]) for k in range(2))
    if not lu < upper:
        out.append((Violation("condition 2", f"lambda_u = {lu} must be < {upper:.6g} (upper bound)"), True))
    rmax = max(r)
    lower = _ratio_minus(2 * h + f + rmax, F_Q[0] * F_Q[1], h + rmax)
    if not lu >= lower:
        # cannot hold together with the upper bound when rebates are equal; kept advisory
        out.append((Violation("condition 2", f"lambda_u = {lu} must be >= {lower:.6g} (lower bound)"), False))
    for k, other in ((0, 1), (1, 0)):
        bound = 1 - (h + r[other]) / lo
        if not F_Q[k] < bound:
            out.append(
                (Violation("condition 3", f"F_{k + 1}(Q_{k + 1}) = {F_Q[k]:.6g} must be < 1 - (h + r_{other + 1})/lambda_o = {bound:.6g}"), True)
            )
    return out


def check_corollary_preconditions(spec: MarketSpec, model: OutflowModel) -> list:
    """All violated existence conditions for an interior two-venue optimum."""
    if spec.K != 2 or model.K != 2:
        raise DomainError("two-exchange conditions need K=2")
    return [v for v, _ in _corollary_checks(spec, model)]


def overfill_probability(model: OutflowModel, q1: float, q2: float, T: float):
    """P(xi_1 > q1, xi_2 > q2, xi_1 + xi_2 > T) for independent venues; returns (value, abs error)."""
    if model.discrete:
        values, probs = model.atoms(0)
        mask = values > q1
        tail = model.sf(1, np.maximum(q2, T - values[mask]))
        return float(np.sum(probs[mask] * tail)), 0.0
    a = max(q1, T - q2)
    value = model.sf(0, a) * model.sf(1, q2)
    err = 0.0
    if T - q2 > q1:
        part, err = integrate.quad(
            lambda x: model.sf(1, T - x) * model.pdf(0, x), q1, T - q2, epsabs=1e-10, epsrel=1e-10, limit=200
        )
        value += part
    return float(value), float(err)


def solve_two(spec: MarketSpec, model: OutflowModel, tol: float = 1e-12, max_steps: int = 200) -> TwoExchangeSolution:
    """Interior optimum for two independent venues.

    Limit sizes are affine in M through the outflow quantiles; M solves
    P(A > S) = (lambda_u - h - f)/(lambda_u + lambda_o), found by bisection
    after the bracket is checked for a sign change.
    """
    if spec.K != 2 or model.K != 2:
        raise DomainError(f"two-exchange solver needs K=2 (spec K={spec.K}, model K={model.K})")
    if not model.independent:
        raise PreconditionError("two-exchange solver needs independent venue outflows",
                                [Violation("independence", f"{model.kind} model declares dependent venues")])
    _require_assumptions(spec)
    checks = _corollary_checks(spec, model)
    blocking = [v for v, b in checks if b]
    if blocking:
        raise PreconditionError(
            "two-exchange existence conditions fail: " + "; ".join(str(v) for v in blocking), blocking
        )
    advisories = tuple(str(v) for v, b in checks if not b)

    h, f, r, lu, lo, S, Q = spec.h, spec.f, spec.r, spec.lambda_u, spec.lambda_o, spec.S, spec.Q
    beta1 = (lo - (h + r[0])) / (lu + lo)
    beta2 = (lo - (h + r[1])) / (lu + lo)
    q2 = model.quantile(1, beta1)
    q1 = model.quantile(0, beta2)
    if not (q1 > Q[0] and q2 > Q[1]):
        raise PreconditionError(
            "limit-size equations leave no interior solution",
            [Violation("interior", f"need F_1^-1 = {q1:.6g} > Q_1 = {Q[0]} and F_2^-1 = {q2:.6g} > Q_2 = {Q[1]}")],
        )
    rhs = (lu - (h + f)) / (lu + lo)

    def limits(M):
        return Q[1] + S - M - q2, Q[0] + S - M - q1

    def g(M):
        value, err = overfill_probability(model, q1, q2, Q[0] + Q[1] + S - M)
        return value - rhs, err

    eps = 1e-6 * S
    lo_M = eps
    hi_M = min(S - eps, Q[1] + S - q2 - eps, Q[0] + S - q1 - eps, Q[0] + Q[1] + S - q1 - q2 - eps)
    if not hi_M > lo_M:
        raise RootNotFoundError(f"empty interior bracket for M: [{lo_M:.6g}, {hi_M:.6g}]")
    g_lo, e_lo = g(lo_M)
    g_hi, e_hi = g(hi_M)
    if g_lo > 0 or g_hi < 0:
        raise RootNotFoundError(
            f"no sign change of the market-order equation on [{lo_M:.6g}, {hi_M:.6g}]: "
            f"residuals {g_lo:.3g}, {g_hi:.3g}"
        )
    err = max(e_lo, e_hi)
    steps = 0
    mid, g_mid = lo_M, g_lo
    while steps < max_steps and hi_M - lo_M > tol * S:
        mid = 0.5 * (lo_M + hi_M)
        g_mid, e_mid = g(mid)
        err = max(err, e_mid)
        steps += 1
        if g_mid == 0:
            break
        if g_mid < 0:
            lo_M = mid
        else:
            hi_M = mid
    M = mid
    L1, L2 = limits(M)
    return TwoExchangeSolution(float(M), float(L1), float(L2), abs(float(g_mid)), float(err), steps, advisories)
