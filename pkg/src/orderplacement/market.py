"""Problem data, fill/cost evaluation and the feasible allocation set.

Money is expressed in mills per share (1 mill = 1e-4 dollars) and quantities in
shares. Quantities are real-valued throughout; rounding to whole shares is a
presentation concern handled by the CLI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError


class Violation(NamedTuple):
    """A failed assumption or precondition, kept as data rather than raised."""

    name: str
    detail: str

    def __str__(self):
        return f"{self.name}: {self.detail}"


def _finite_tuple(values, what):
    try:
        out = tuple(float(v) for v in values)
    except TypeError:
        out = (float(values),)
    if not all(math.isfinite(v) for v in out):
        raise DomainError(f"{what} must be finite, got {out}")
    return out


@dataclass(frozen=True)
class MarketSpec:
    """Prices, penalties, target and queue state for one placement decision.

    Attributes:
        h: half bid-ask spread.
        f: fee for taking liquidity with a market order.
        r: per-venue rebates for executed limit orders (may be negative).
        lambda_u: penalty per share of shortfall below the target.
        lambda_o: penalty per share bought in excess of the target.
        S: target quantity.
        Q: per-venue queue sizes ahead of our limit order.
    """

    h: float
    f: float
    r: tuple
    lambda_u: float
    lambda_o: float
    S: float
    Q: tuple

    def __post_init__(self):
        r = _finite_tuple(self.r, "rebates")
        Q = _finite_tuple(self.Q, "queues")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "Q", Q)
        for name in ("h", "f", "lambda_u", "lambda_o", "S"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if len(r) < 1:
            raise DomainError("need at least one venue (K >= 1)")
        if len(r) != len(Q):
            raise DomainError(f"rebates have {len(r)} venues but queues have {len(Q)}")
        if self.S <= 0:
            raise DomainError(f"target S must be positive, got {self.S}")
        if any(q < 0 for q in Q):
            raise DomainError(f"queue sizes must be nonnegative, got {Q}")
        if self.lambda_u < 0 or self.lambda_o < 0:
            raise DomainError("penalties lambda_u and lambda_o must be nonnegative")

    @property
    def K(self) -> int:
        return len(self.r)

    def replace(self, **changes) -> "MarketSpec":
        return replace(self, **changes)

    def venue(self, k: int) -> "MarketSpec":
        """The single-exchange problem that only uses venue ``k``."""
        return replace(self, r=(self.r[k],), Q=(self.Q[k],))

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "f": self.f,
            "r": list(self.r),
            "lambda_u": self.lambda_u,
            "lambda_o": self.lambda_o,
            "S": self.S,
            "Q": list(self.Q),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MarketSpec":
        return cls(**{k: data[k] for k in ("h", "f", "r", "lambda_u", "lambda_o", "S", "Q")})


@dataclass(frozen=True)
class Allocation:
    """Order sizes X = (M, L_1, ..., L_K): one market order and K limit orders."""

    M: float
    L: tuple = field(default=())

    def __post_init__(self):
        M = float(self.M)
        L = _finite_tuple(self.L, "limit sizes")
        if not math.isfinite(M):
            raise DomainError(f"market size must be finite, got {M}")
        if M < 0 or any(v < 0 for v in L):
            raise DomainError(f"allocation components must be nonnegative, got M={M}, L={L}")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "L", L)

    @property
    def K(self) -> int:
        return len(self.L)

    @property
    def total(self) -> float:
        return self.M + sum(self.L)

    def to_array(self) -> np.ndarray:
        return np.array((self.M,) + self.L, dtype=float)

    @classmethod
    def from_array(cls, x) -> "Allocation":
        x = np.asarray(x, dtype=float).ravel()
        # clean -0.0 and round-off negatives left by projections
        x = np.where(np.abs(x) < 1e-12, 0.0, x)
        return cls(float(x[0]), tuple(float(v) for v in x[1:]))

    def to_dict(self) -> dict:
        return {"M": self.M, "L": list(self.L)}

    @classmethod
    def from_dict(cls, data: dict) -> "Allocation":
        return cls(data["M"], tuple(data["L"]))


@dataclass(frozen=True)
class OutcomeIndicators:
    """The indicator events through which the stochastic gradient sees an outflow draw."""

    under_target: bool
    over_target: bool
    full_fill: tuple


def _vector(X, K=None) -> np.ndarray:
    x = X.to_array() if isinstance(X, Allocation) else np.asarray(X, dtype=float).ravel()
    if K is not None and x.size != K + 1:
        raise DomainError(f"allocation has {x.size - 1} venues, market spec has {K}")
    return x


def _outflows(xi, K) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != K:
        raise DomainError(f"outflow sample has width {xi.shape[-1]}, market spec has K={K}")
    if not np.all(np.isfinite(xi)) or np.any(xi < 0):
        raise DomainError("outflows must be finite and nonnegative")
    return xi


def limit_fill(xi_k: float, Q_k: float, L_k: float) -> float:
    """Shares bought by a limit order of size ``L_k`` behind a queue of ``Q_k``."""
    if xi_k < 0 or Q_k < 0 or L_k < 0:
        raise DomainError(f"limit_fill inputs must be nonnegative, got ({xi_k}, {Q_k}, {L_k})")
    return max(xi_k - Q_k, 0.0) - max(xi_k - Q_k - L_k, 0.0)


def fills(X, xi, spec: MarketSpec) -> np.ndarray:
    """Per-venue limit fills; ``xi`` may be one draw of shape (K,) or a batch (n, K)."""
    x = _vector(X, spec.K)
    xi = _outflows(xi, spec.K)
    Q = np.asarray(spec.Q)
    return np.minimum(np.maximum(xi - Q, 0.0), x[1:])


def total_filled(X, xi, spec: MarketSpec):
    """A(X, xi): the market order plus everything the limit orders bought."""
    x = _vector(X, spec.K)
    out = x[0] + fills(x, xi, spec).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def costs(X, xi, spec: MarketSpec):
    """Realized cost v(X, xi) for one draw or a batch of draws (total mills)."""
    x = _vector(X, spec.K)
    filled = fills(x, xi, spec)
    A = x[0] + filled.sum(axis=-1)
    rebate_gain = filled @ (spec.h + np.asarray(spec.r))
    v = (
        (spec.h + spec.f) * x[0]
        - rebate_gain
        + spec.lambda_u * np.maximum(spec.S - A, 0.0)
        + spec.lambda_o * np.maximum(A - spec.S, 0.0)
    )
    return float(v) if np.ndim(v) == 0 else v


def realized_cost(X, xi, spec: MarketSpec) -> float:
    """Execution cost relative to the mid-quote plus the target-violation penalty."""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1:
        raise DomainError("realized_cost takes a single outflow draw; use costs() for batches")
    return costs(X, xi, spec)


def outcome_indicators(X, xi, spec: MarketSpec) -> OutcomeIndicators:
    x = _vector(X, spec.K)
    xi = _outflows(xi, spec.K)
    A = total_filled(x, xi, spec)
    full = xi > np.asarray(spec.Q) + x[1:]
    return OutcomeIndicators(bool(A < spec.S), bool(A > spec.S), tuple(bool(b) for b in full))


def feasible_set_contains(X, spec: MarketSpec, tol: float = 0.0) -> bool:
    """Membership in C = {0 <= M <= S, 0 <= L_k <= S - M, M + sum(L) >= S}."""
    x = _vector(X, spec.K)
    S = spec.S
    M, L = x[0], x[1:]
    return bool(
        -tol <= M <= S + tol
        and np.all(L >= -tol)
        and np.all(L <= S - M + tol)
        and M + L.sum() >= S - tol
    )


def _truncate(y: np.ndarray, S: float) -> np.ndarray:
    x = np.maximum(np.asarray(y, dtype=float), 0.0)
    x[0] = min(x[0], S)
    x[1:] = np.minimum(x[1:], S - x[0])
    deficit = S - x.sum()
    if deficit > 0:
        x[-1] += deficit
        # round-off can leave the sum a few ulps short of S
        while x[0] + x[1:].sum() < S and x[-1] < S - x[0]:
            x[-1] = np.nextafter(x[-1], np.inf)
    return x


def truncate_to_C(X, spec: MarketSpec) -> Allocation:
    """Map an allocation into C by capping M, capping each L_k at S - M, then padding L_K.

    Capping never increases the realized cost for any outflow; padding the last
    venue with the coverage deficit does not increase the expected cost under
    A1-A2. Allocations already in C are returned unchanged.
    """
    return Allocation.from_array(_truncate(_vector(X, spec.K), spec.S))


def _project_coupled_box(z: np.ndarray, S: float) -> np.ndarray:
    # Euclidean projection onto {M >= 0, 0 <= L_k <= S - M}. For fixed M the L part is
    # a box clip; the optimal M solves (M - z_M) + sum_k (M - (S - z_k))_+ = 0.
    zM, zL = z[0], z[1:]
    breaks = np.sort(S - zL)
    active, acc = 0, 0.0
    M = zM
    for b in breaks:
        M = (zM + acc) / (1 + active)
        if M <= b:
            break
        active += 1
        acc += b
    else:
        M = (zM + acc) / (1 + active)
    M = min(max(M, 0.0), S)
    out = np.empty_like(z)
    out[0] = M
    out[1:] = np.clip(zL, 0.0, S - M)
    return out


def project_to_C(y, S: float) -> np.ndarray:
    """Euclidean projection of ``y`` = (M, L_1..L_K) onto C."""
    y = np.asarray(y, dtype=float)
    x = _project_coupled_box(y, S)
    if x.sum() >= S:
        return x
    # coverage constraint active: x(tau) = P(y + tau), find tau with sum(x) = S
    upper = S - y.min() + 1.0
    tau = brentq(
        lambda t: _project_coupled_box(y + t, S).sum() - S, 0.0, upper, xtol=1e-13 * S, rtol=1e-15
    )
    x = _project_coupled_box(y + tau, S)
    shortfall = S - x.sum()
    if shortfall > 0:
        # absorb root-finder round-off so the result is exactly feasible
        room = (S - x[0]) - x[1:]
        k = int(np.argmax(room))
        x[1 + k] += min(shortfall, room[k])
    return x


def validate_assumptions(spec: MarketSpec) -> list:
    """Check A1 (limit orders reduce cost) and A2 (no incentive to overfill)."""
    violations = []
    h, f = spec.h, spec.f
    rmin, rmax = min(spec.r), max(spec.r)
    if not rmin + h > 0:
        violations.append(Violation("A1", f"min(r) + h = {rmin} + {h} = {rmin + h} must be > 0"))
    if not spec.lambda_o > h + rmax:
        violations.append(
            Violation("A2", f"lambda_o = {spec.lambda_o} must exceed h + max(r) = {h + rmax}")
        )
    if not spec.lambda_o > -(h + f):
        violations.append(
            Violation("A2", f"lambda_o = {spec.lambda_o} must exceed -(h + f) = {-(h + f)}")
        )
    return violations


def lower_cost_bound(spec: MarketSpec) -> float:
    """-(h + max r) S, a pathwise lower bound on the realized cost under A2."""
    return -(spec.h + max(spec.r)) * spec.S


def as_allocation(X, K: int | None = None) -> Allocation:
    if isinstance(X, Allocation):
        if K is not None and X.K != K:
            raise DomainError(f"allocation has {X.K} venues, expected {K}")
        return X
    return Allocation.from_array(_vector(X, K))


def zero_allocation(K: int) -> Allocation:
    return Allocation(0.0, (0.0,) * K)
