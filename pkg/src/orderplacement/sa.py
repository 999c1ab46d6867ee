"""Robust stochastic approximation: constant step, fresh draw per step, iterate averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .market import (
    Allocation,
    MarketSpec,
    _truncate,
    _vector,
    costs,
    project_to_C,
)
from .outflows import OutflowModel, make_rng, stream

PROJECTIONS = ("truncate", "feasible", "box", "none")


def stochastic_gradient(X, xi, spec: MarketSpec) -> np.ndarray:
    """Gradient of v(., xi) at X, built from the three indicator families.

    Works on one draw (K,) or a batch (n, K); indicators use strict inequalities,
    so A == S contributes no penalty term.
    """
    x = _vector(X, spec.K)
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != spec.K:
        raise DomainError(f"outflow sample has width {xi.shape[-1]}, market spec has K={spec.K}")
    Q = np.asarray(spec.Q)
    L = x[1:]
    A = x[0] + np.minimum(np.maximum(xi - Q, 0.0), L).sum(axis=-1)
    penalty = -spec.lambda_u * (A < spec.S) + spec.lambda_o * (A > spec.S)
    penalty = np.asarray(penalty, dtype=float)
    full = xi > Q + L
    g_limit = (-(spec.h + np.asarray(spec.r)) + penalty[..., None]) * full
    g_market = spec.h + spec.f + penalty
    return np.concatenate([np.asarray(g_market)[..., None], g_limit], axis=-1)


def gradient_norm_bound(spec: MarketSpec) -> float:
    """G: the largest possible Euclidean norm of a stochastic gradient."""
    lam = spec.lambda_u + spec.lambda_o
    r = np.asarray(spec.r)
    return math.sqrt((spec.h + spec.f + lam) ** 2 + float(np.sum((spec.h + r + lam) ** 2)))


def feasible_diameter(spec: MarketSpec) -> float:
    """D: an upper bound on the Euclidean diameter of C."""
    return spec.S * math.sqrt(spec.K + 1)


def default_step(spec: MarketSpec, N: int) -> float:
    """gamma = sqrt(K) S / sqrt(N (h+f+lu+lo)^2 + N sum_k (h+r_k+lu+lo)^2)."""
    if int(N) < 1:
        raise DomainError(f"iteration count must be at least 1, got {N}")
    return math.sqrt(spec.K) * spec.S / (math.sqrt(N) * gradient_norm_bound(spec))


def performance_bound(spec: MarketSpec, N: int) -> float:
    """D G / sqrt(N), the guaranteed expected-objective gap of the averaged iterate."""
    return feasible_diameter(spec) * gradient_norm_bound(spec) / math.sqrt(N)


def project(y: np.ndarray, S: float, method: str) -> np.ndarray:
    if method == "truncate":
        return _truncate(y, S)
    if method == "feasible":
        return project_to_C(y, S)
    if method == "box":
        return np.clip(y, 0.0, S)
    if method == "none":
        return y
    raise DomainError(f"unknown projection {method!r}; choose from {PROJECTIONS}")


@dataclass
class SAConfig:
    """Settings of one stochastic-approximation run.

    ``projection`` maps each raw step back to a bounded set: ``truncate`` caps
    and pads into C, ``feasible`` is the Euclidean projection onto C, ``box``
    clamps to [0, S]^(K+1) and ``none`` leaves iterates untouched.
    """

    iterations: int = 1000
    X0: Allocation | None = None
    step: float | None = None
    burn_in_fraction: float = 0.0
    projection: str = "truncate"
    seed: int = 0
    eval_count: int = 10_000
    trace_every: int = 0

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise DomainError(f"iterations must be at least 1, got {self.iterations}")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise DomainError(f"burn_in_fraction must lie in [0, 1), got {self.burn_in_fraction}")
        if self.projection not in PROJECTIONS:
            raise DomainError(f"unknown projection {self.projection!r}; choose from {PROJECTIONS}")
        if self.step is not None and not self.step > 0:
            raise DomainError(f"step must be positive, got {self.step}")
        if int(self.eval_count) < 2:
            raise DomainError("eval_count must be at least 2")
        if self.X0 is not None and not isinstance(self.X0, Allocation):
            self.X0 = Allocation.from_array(self.X0)

    def to_dict(self) -> dict:
        return {
            "iterations": int(self.iterations),
            "X0": None if self.X0 is None else self.X0.to_dict(),
            "step": self.step,
            "burn_in_fraction": self.burn_in_fraction,
            "projection": self.projection,
            "seed": int(self.seed),
            "eval_count": int(self.eval_count),
            "trace_every": int(self.trace_every),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SAConfig":
        data = dict(data)
        if data.get("X0") is not None:
            data["X0"] = Allocation.from_dict(data["X0"])
        return cls(**data)


@dataclass
class SAReport:
    """Result of :func:`solve_sa`.

    ``objective_estimate`` and ``objective_se`` are in mills per share on the
    scoring batch; ``bound`` is D*G/sqrt(N) in total mills.
    """

    X_hat: Allocation
    objective_estimate: float
    objective_se: float
    bound: float
    step: float
    iterations: int
    projection: str
    seed: int
    diverged: bool = False
    trace: list = field(default_factory=list)

    @property
    def cost_per_share(self) -> float:
        return self.objective_estimate

    def to_dict(self) -> dict:
        return {
            "X_hat": self.X_hat.to_dict(),
            "objective_estimate": self.objective_estimate,
            "objective_se": self.objective_se,
            "bound": self.bound,
            "step": self.step,
            "iterations": self.iterations,
            "projection": self.projection,
            "seed": self.seed,
            "diverged": self.diverged,
            "trace": [list(row) for row in self.trace],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SAReport":
        data = dict(data)
        data["X_hat"] = Allocation.from_dict(data["X_hat"])
        data["trace"] = [list(row) for row in data.get("trace", [])]
        return cls(**data)


def equal_split(spec: MarketSpec) -> Allocation:
    share = spec.S / (spec.K + 1)
    return Allocation(share, (share,) * spec.K)


def run_iterations(spec: MarketSpec, draws: np.ndarray, X0, step: float, projection: str):
    """Iterates X_1..X_N of the projected subgradient loop over pre-drawn outflows."""
    x = _vector(X0, spec.K).copy()
    S = spec.S
    Q = np.asarray(spec.Q)
    hr = spec.h + np.asarray(spec.r)
    hf = spec.h + spec.f
    lu, lo = spec.lambda_u, spec.lambda_o
    out = np.empty((draws.shape[0], x.size))
    g = np.empty_like(x)
    for n, xi in enumerate(draws):
        L = x[1:]
        A = x[0] + np.minimum(np.maximum(xi - Q, 0.0), L).sum()
        pen = -lu if A < S else (lo if A > S else 0.0)
        g[0] = hf + pen
        g[1:] = (pen - hr) * (xi > Q + L)
        x = project(x - step * g, S, projection)
        out[n] = x
    return out


def solve_sa(spec: MarketSpec, model: OutflowModel, cfg: SAConfig | None = None, eval_draws=None) -> SAReport:
    """Average of projected constant-step subgradient iterates, scored on a fresh batch.

    Draws for the loop and for scoring come from disjoint streams derived from
    ``cfg.seed``; ``eval_draws`` overrides the scoring batch (common random numbers).
    """
    cfg = cfg or SAConfig()
    if model.K != spec.K:
        raise DomainError(f"model has K={model.K}, market spec has K={spec.K}")
    N = int(cfg.iterations)
    step = cfg.step if cfg.step is not None else default_step(spec, N)
    X0 = cfg.X0 if cfg.X0 is not None else equal_split(spec)
    draws = model.draw(make_rng(stream(cfg.seed, "sa", "iterations")), N)
    with np.errstate(over="ignore", invalid="ignore"):
        iterates = run_iterations(spec, draws, X0, step, cfg.projection)
    start = int(math.floor(cfg.burn_in_fraction * N))
    x_hat = iterates[start:].mean(axis=0)
    diverged = not np.all(np.isfinite(x_hat))
    trace = []
    if cfg.trace_every:
        for n in range(cfg.trace_every - 1, N, cfg.trace_every):
            trace.append([n + 1] + [float(v) for v in iterates[n]])
    if diverged:
        return SAReport(Allocation(0.0, (0.0,) * spec.K), math.nan, math.nan,
                        performance_bound(spec, N), step, N, cfg.projection, int(cfg.seed), True, trace)
    # the unprojected loop can leave the nonnegative orthant; score a clipped copy
    X_hat = Allocation.from_array(np.maximum(x_hat, 0.0))
    if eval_draws is None:
        eval_draws = model.draw(make_rng(stream(cfg.seed, "sa", "evaluation")), int(cfg.eval_count))
    per_share = costs(X_hat, eval_draws, spec) / spec.S
    se = float(per_share.std(ddof=1) / math.sqrt(per_share.size)) if per_share.size > 1 else 0.0
    return SAReport(
        X_hat,
        float(per_share.mean()),
        se,
        performance_bound(spec, N),
        float(step),
        N,
        cfg.projection,
        int(cfg.seed),
        False,
        trace,
    )
