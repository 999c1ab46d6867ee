"""Queue-outflow distributions: samplers, marginal CDFs/quantiles, empirical files.

Every model maps a :class:`numpy.random.Generator` to an ``(n, K)`` array of
outflow draws, one column per venue. Random streams are derived from a single
root seed by :func:`stream`, so a run is reproducible from ``(root seed, labels)``
regardless of how work is split across processes.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import DomainError, ParseError

KINDS = ("exponential", "pareto", "poisson", "factor", "empirical")


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise DomainError(f"stream labels must be nonnegative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def stream(root_seed: int, *labels) -> np.random.SeedSequence:
    """Seed sequence for the stream identified by ``labels`` under ``root_seed``.

    String labels are mapped to integers with CRC-32 and used, together with
    integer labels, as the spawn key of a :class:`numpy.random.SeedSequence`
    whose entropy is the root seed. Distinct label tuples give statistically
    independent streams; identical tuples give identical streams.
    """
    return np.random.SeedSequence(int(root_seed), spawn_key=tuple(_label_key(x) for x in labels))


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _positive_means(means, K=None):
    arr = np.atleast_1d(np.asarray(means, dtype=float))
    if K is not None and arr.size == 1 and K > 1:
        arr = np.repeat(arr, K)
    if arr.ndim != 1 or arr.size < 1:
        raise DomainError("need one mean per venue")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError(f"outflow means must be positive, got {arr.tolist()}")
    return tuple(float(v) for v in arr)


def _check_prob(p):
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {p}")
    return p


class OutflowModel:
    """Common interface of all outflow distributions.

    Subclasses set ``kind``, ``K``, ``discrete`` and ``independent`` and implement
    :meth:`draw`, :meth:`cdf` and :meth:`quantile`. Continuous kinds also
    provide :meth:`pdf`; discrete ones provide :meth:`atoms`.
    """

    kind = ""
    discrete = False
    independent = True
    horizon = 1.0
    # True when every venue's outflow can exceed any level with positive probability
    unbounded_support = True

    @property
    def K(self) -> int:
        raise NotImplementedError

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        raise NotImplementedError

    def cdf(self, k: int, x):
        raise NotImplementedError

    def quantile(self, k: int, p: float) -> float:
        raise NotImplementedError

    def sf(self, k: int, x):
        return 1.0 - self.cdf(k, x)

    def pdf(self, k: int, x):
        raise DomainError(f"{self.kind} outflows have no density")

    def atoms(self, k: int):
        raise DomainError(f"{self.kind} outflows are not discrete")

    def marginal(self, k: int) -> "OutflowModel":
        raise NotImplementedError

    def mean(self, k: int) -> float:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    def _venue(self, k):
        if not 0 <= k < self.K:
            raise DomainError(f"venue index {k} out of range for K={self.K}")
        return k


class ExponentialOutflow(OutflowModel):
    """Independent exponential outflows with per-venue mean rates."""

    kind = "exponential"

    def __init__(self, means, horizon: float = 1.0):
        self.means = _positive_means(means)
        self.horizon = float(horizon)
        if self.horizon <= 0:
            raise DomainError("horizon must be positive")

    @property
    def K(self):
        return len(self.means)

    def _scale(self, k):
        return self.means[self._venue(k)] * self.horizon

    def mean(self, k):
        return self._scale(k)

    def draw(self, rng, count):
        scales = np.array(self.means) * self.horizon
        return rng.exponential(1.0, size=(count, self.K)) * scales

    def cdf(self, k, x):
        x = np.asarray(x, dtype=float)
        out = np.where(x < 0, 0.0, -np.expm1(-np.maximum(x, 0.0) / self._scale(k)))
        return float(out) if out.ndim == 0 else out

    def sf(self, k, x):
        x = np.asarray(x, dtype=float)
        out = np.where(x < 0, 1.0, np.exp(-np.maximum(x, 0.0) / self._scale(k)))
        return float(out) if out.ndim == 0 else out

    def pdf(self, k, x):
        x = np.asarray(x, dtype=float)
        s = self._scale(k)
        out = np.where(x < 0, 0.0, np.exp(-np.maximum(x, 0.0) / s) / s)
        return float(out) if out.ndim == 0 else out

    def quantile(self, k, p):
        return -self._scale(k) * math.log1p(-_check_prob(p))

    def marginal(self, k):
        return ExponentialOutflow((self.means[self._venue(k)],), self.horizon)

    def describe(self):
        return {"kind": self.kind, "means": list(self.means), "horizon": self.horizon}


class ParetoOutflow(OutflowModel):
    """Independent standard Pareto outflows parameterized by mean and tail index.

    The scale is ``x_m = mean * (a - 1) / a`` so that the distribution has the
    requested mean; a mean of 2200 with index 5 gives ``x_m = 1760``.
    """

    kind = "pareto"

    def __init__(self, means, tail_index: float, horizon: float = 1.0):
        self.means = _positive_means(means)
        self.tail_index = float(tail_index)
        self.horizon = float(horizon)
        if not self.tail_index > 1:
            raise DomainError(f"Pareto tail index must exceed 1 for a finite mean, got {tail_index}")
        if self.horizon <= 0:
            raise DomainError("horizon must be positive")

    @property
    def K(self):
        return len(self.means)

    def scale(self, k):
        a = self.tail_index
        return self.means[self._venue(k)] * self.horizon * (a - 1) / a

    def mean(self, k):
        return self.means[self._venue(k)] * self.horizon

    def draw(self, rng, count):
        a = self.tail_index
        scales = np.array([self.scale(k) for k in range(self.K)])
        u = rng.random(size=(count, self.K))
        # inverse transform on 1 - u keeps draws finite
        return scales * (1.0 - u) ** (-1.0 / a)

    def cdf(self, k, x):
        x = np.asarray(x, dtype=float)
        xm = self.scale(k)
        out = np.where(x < xm, 0.0, 1.0 - (xm / np.maximum(x, xm)) ** self.tail_index)
        return float(out) if out.ndim == 0 else out

    def sf(self, k, x):
        x = np.asarray(x, dtype=float)
        xm = self.scale(k)
        out = np.where(x < xm, 1.0, (xm / np.maximum(x, xm)) ** self.tail_index)
        return float(out) if out.ndim == 0 else out

    def pdf(self, k, x):
        x = np.asarray(x, dtype=float)
        xm, a = self.scale(k), self.tail_index
        out = np.where(x < xm, 0.0, a * xm**a / np.maximum(x, xm) ** (a + 1))
        return float(out) if out.ndim == 0 else out

    def quantile(self, k, p):
        return self.scale(k) * (1.0 - _check_prob(p)) ** (-1.0 / self.tail_index)

    def marginal(self, k):
        return ParetoOutflow((self.means[self._venue(k)],), self.tail_index, self.horizon)

    def describe(self):
        return {
            "kind": self.kind,
            "means": list(self.means),
            "tail_index": self.tail_index,
            "horizon": self.horizon,
        }


def _poisson_quantile(mu: float, p: float) -> float:
    # generalized inverse min{q : F(q) >= p}; scipy's ppf is nudged to be exact
    dist = stats.poisson(mu)
    q = float(dist.ppf(p))
    while q > 0 and dist.cdf(q - 1) >= p:
        q -= 1
    while dist.cdf(q) < p:
        q += 1
    return q


def _poisson_support(mu: float, width: float = 12.0):
    # +-12 standard deviations leaves tail mass far below double precision
    if mu == 0:
        return np.zeros(1), np.ones(1)
    spread = width * math.sqrt(mu) + 20
    ks = np.arange(max(0, math.floor(mu - spread)), math.ceil(mu + spread) + 1)
    return ks.astype(float), stats.poisson.pmf(ks, mu)


class PoissonOutflow(OutflowModel):
    """Independent Poisson outflows with per-venue means ``mu_k * horizon``."""

    kind = "poisson"
    discrete = True

    def __init__(self, means, horizon: float = 1.0):
        self.means = _positive_means(means)
        self.horizon = float(horizon)
        if self.horizon <= 0:
            raise DomainError("horizon must be positive")

    @property
    def K(self):
        return len(self.means)

    def mean(self, k):
        return self.means[self._venue(k)] * self.horizon

    def draw(self, rng, count):
        lam = np.array(self.means) * self.horizon
        return rng.poisson(lam, size=(count, self.K)).astype(float)

    def cdf(self, k, x):
        x = np.asarray(x, dtype=float)
        out = stats.poisson.cdf(np.floor(x), self.mean(k))
        return float(out) if out.ndim == 0 else out

    def sf(self, k, x):
        x = np.asarray(x, dtype=float)
        out = stats.poisson.sf(np.floor(x), self.mean(k))
        return float(out) if out.ndim == 0 else out

    def quantile(self, k, p):
        return _poisson_quantile(self.mean(k), _check_prob(p))

    def atoms(self, k):
        return _poisson_support(self.mean(k))

    def marginal(self, k):
        return PoissonOutflow((self.means[self._venue(k)],), self.horizon)

    def describe(self):
        return {"kind": self.kind, "means": list(self.means), "horizon": self.horizon}


@lru_cache(maxsize=64)
def _two_term_atoms(a: float, mu1: float, b: float, mu2: float):
    """Atoms of a*X + b*Y for independent X ~ Poisson(mu1), Y ~ Poisson(mu2)."""
    x1, p1 = _poisson_support(mu1) if a != 0 else (np.zeros(1), np.ones(1))
    x2, p2 = _poisson_support(mu2) if b != 0 else (np.zeros(1), np.ones(1))
    values = (a * x1[:, None] + b * x2[None, :]).ravel()
    probs = (p1[:, None] * p2[None, :]).ravel()
    # merge coincident lattice points that differ only by round-off
    keys = np.round(values, 9)
    order = np.argsort(keys, kind="stable")
    keys, probs = keys[order], probs[order]
    uniq, start = np.unique(keys, return_index=True)
    merged = np.add.reduceat(probs, start)
    cum = np.cumsum(merged)
    cum /= cum[-1]
    uniq.setflags(write=False)
    merged.setflags(write=False)
    cum.setflags(write=False)
    return uniq, merged, cum


class LinearPoissonOutflow(OutflowModel):
    """Outflows that are fixed linear combinations of independent Poisson factors.

    ``xi = weights @ N`` with ``N_j ~ Poisson(factor_means[j] * horizon)``. Each
    venue's marginal must involve at most two distinct nonzero weights so that
    its CDF can be computed exactly on the lattice of attainable values.
    """

    kind = "factor"
    discrete = True

    def __init__(self, weights, factor_means, horizon: float = 1.0):
        W = np.atleast_2d(np.asarray(weights, dtype=float))
        m = np.asarray(factor_means, dtype=float).ravel()
        if W.shape[1] != m.size:
            raise DomainError("weights must have one column per factor")
        if np.any(W < 0) or np.any(m < 0):
            raise DomainError("factor weights and means must be nonnegative")
        if np.any(W.sum(axis=1) == 0):
            raise DomainError("every venue needs a nonzero factor weight")
        self.weights = W
        self.factor_means = m
        self.horizon = float(horizon)
        if self.horizon <= 0:
            raise DomainError("horizon must be positive")
        self.independent = bool(np.all((W > 0).sum(axis=0) <= 1) or W.shape[0] == 1)

    @property
    def K(self):
        return self.weights.shape[0]

    def mean(self, k):
        return float(self.weights[self._venue(k)] @ self.factor_means) * self.horizon

    def draw(self, rng, count):
        lam = self.factor_means * self.horizon
        N = rng.poisson(lam, size=(count, lam.size)).astype(float)
        return N @ self.weights.T

    def _terms(self, k):
        # group factors by weight; equal weights merge into one Poisson term
        row = self.weights[self._venue(k)]
        groups = {}
        for w, m in zip(row, self.factor_means * self.horizon):
            if w > 0 and m > 0:
                groups[float(w)] = groups.get(float(w), 0.0) + float(m)
        if len(groups) > 2:
            raise DomainError("exact marginals support at most two distinct factor weights")
        terms = sorted(groups.items())
        while len(terms) < 2:
            terms.append((0.0, 0.0))
        return terms

    def atoms(self, k):
        (a, m1), (b, m2) = self._terms(k)
        values, probs, _ = _two_term_atoms(a, m1, b, m2)
        return values, probs

    def _table(self, k):
        (a, m1), (b, m2) = self._terms(k)
        return _two_term_atoms(a, m1, b, m2)

    def cdf(self, k, x):
        values, _, cum = self._table(k)
        idx = np.searchsorted(values, np.asarray(x, dtype=float), side="right") - 1
        out = np.where(idx < 0, 0.0, cum[np.maximum(idx, 0)])
        return float(out) if out.ndim == 0 else out

    def sf(self, k, x):
        values, probs, _ = self._table(k)
        tail = np.cumsum(probs[::-1])[::-1] / probs.sum()
        idx = np.searchsorted(values, np.asarray(x, dtype=float), side="right")
        out = np.where(idx >= values.size, 0.0, tail[np.minimum(idx, values.size - 1)])
        return float(out) if out.ndim == 0 else out

    def quantile(self, k, p):
        p = _check_prob(p)
        values, _, cum = self._table(k)
        i = int(np.searchsorted(cum, p, side="left"))
        return float(values[min(i, values.size - 1)])

    def marginal(self, k):
        return LinearPoissonOutflow(self.weights[[self._venue(k)]], self.factor_means, self.horizon)

    def consolidated(self) -> "LinearPoissonOutflow":
        """The single venue whose outflow is the sum of all venues' outflows."""
        return LinearPoissonOutflow(self.weights.sum(axis=0, keepdims=True), self.factor_means, self.horizon)

    def describe(self):
        return {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "factor_means": self.factor_means.tolist(),
            "horizon": self.horizon,
        }


class FactorOutflow(LinearPoissonOutflow):
    """Single-factor Poisson model ``xi_k = alpha*xi_0 + (1 - alpha)*eps_k``.

    ``xi_0 ~ Poisson(common_mean*T)`` is shared by all venues and
    ``eps_k ~ Poisson(means[k]*T)`` are venue specific; ``common_mean`` defaults
    to the average of ``means``. Alpha = 0 gives independent venues and
    alpha = 1 perfectly correlated ones.
    """

    def __init__(self, means, alpha: float, horizon: float = 1.0, common_mean: float | None = None, K: int | None = None):
        means = _positive_means(means, K)
        alpha = float(alpha)
        if not 0.0 <= alpha <= 1.0:
            raise DomainError(f"factor weight alpha must lie in [0, 1], got {alpha}")
        if common_mean is None:
            common_mean = float(np.mean(means))
        if common_mean <= 0:
            raise DomainError("common factor mean must be positive")
        K = len(means)
        W = np.hstack([np.full((K, 1), alpha), (1.0 - alpha) * np.eye(K)])
        super().__init__(W, (common_mean,) + means, horizon)
        self.means = means
        self.alpha = alpha
        self.common_mean = float(common_mean)
        self.independent = alpha == 0.0 or K == 1

    def draw(self, rng, count):
        # explicit draw order: common factor column first, then venue noise
        lam = self.factor_means * self.horizon
        N = rng.poisson(lam, size=(count, lam.size)).astype(float)
        return self.alpha * N[:, :1] + (1.0 - self.alpha) * N[:, 1:]

    def describe(self):
        return {
            "kind": self.kind,
            "means": list(self.means),
            "alpha": self.alpha,
            "common_mean": self.common_mean,
            "horizon": self.horizon,
        }


class EmpiricalOutflow(OutflowModel):
    """Resamples stored outflow rows uniformly with replacement.

    Rows are resampled jointly, so cross-venue dependence in the data is kept.
    Optional feature columns (queue sizes, previous volume) ride along for
    bucketing but do not affect sampling.
    """

    kind = "empirical"
    discrete = True
    unbounded_support = False

    def __init__(self, rows, features: dict | None = None, horizon: float = 1.0):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.size == 0 or rows.shape[0] < 1:
            raise DomainError("empirical model needs at least one sample row")
        if not np.all(np.isfinite(rows)) or np.any(rows < 0):
            raise DomainError("empirical outflows must be finite and nonnegative")
        self.rows = rows
        self.rows.setflags(write=False)
        self.features = {k: np.asarray(v, dtype=float) for k, v in (features or {}).items()}
        for name, col in self.features.items():
            if col.shape != (rows.shape[0],):
                raise DomainError(f"feature {name!r} must have one value per row")
        self.horizon = float(horizon)
        self.independent = rows.shape[1] == 1
        self._sorted = [np.sort(rows[:, k]) for k in range(rows.shape[1])]

    @property
    def K(self):
        return self.rows.shape[1]

    @property
    def n_rows(self):
        return self.rows.shape[0]

    def mean(self, k):
        return float(self.rows[:, self._venue(k)].mean())

    def draw(self, rng, count):
        idx = rng.integers(0, self.n_rows, size=count)
        return self.rows[idx].copy()

    def cdf(self, k, x):
        col = self._sorted[self._venue(k)]
        out = np.searchsorted(col, np.asarray(x, dtype=float), side="right") / col.size
        return float(out) if np.ndim(out) == 0 else out

    def quantile(self, k, p):
        p = _check_prob(p)
        col = self._sorted[self._venue(k)]
        levels = np.arange(1, col.size + 1) / col.size
        return float(col[int(np.searchsorted(levels, p, side="left"))])

    def atoms(self, k):
        values, counts = np.unique(self.rows[:, self._venue(k)], return_counts=True)
        return values, counts / counts.sum()

    def marginal(self, k):
        return EmpiricalOutflow(self.rows[:, [self._venue(k)]], self.features, self.horizon)

    def subset(self, mask) -> "EmpiricalOutflow":
        mask = np.asarray(mask)
        return EmpiricalOutflow(
            self.rows[mask], {k: v[mask] for k, v in self.features.items()}, self.horizon
        )

    def describe(self):
        return {
            "kind": self.kind,
            "rows": int(self.n_rows),
            "K": self.K,
            "features": sorted(self.features),
            "horizon": self.horizon,
        }


@dataclass
class SampleBatch:
    """Outflow draws of shape (count, K) together with their provenance."""

    rows: np.ndarray
    seed: object
    model: dict = field(default_factory=dict)

    def __len__(self):
        return self.rows.shape[0]


def sample(model: OutflowModel, seed, count: int) -> SampleBatch:
    """Draw ``count`` i.i.d. outflow vectors; identical arguments give identical rows."""
    if int(count) < 1:
        raise DomainError(f"sample count must be at least 1, got {count}")
    rows = model.draw(make_rng(seed), int(count))
    seed_repr = seed if isinstance(seed, (int, np.integer)) else repr(seed)
    return SampleBatch(rows, seed_repr, model.describe())


def cdf(model: OutflowModel, k: int, x):
    return model.cdf(k, x)


def quantile(model: OutflowModel, k: int, p: float) -> float:
    return model.quantile(k, p)


def consolidate(model: OutflowModel) -> OutflowModel:
    """Single-venue model whose outflow is the sum of ``model``'s venue outflows."""
    if isinstance(model, LinearPoissonOutflow):
        return model.consolidated()
    if isinstance(model, PoissonOutflow):
        return PoissonOutflow((sum(model.means),), model.horizon)
    if isinstance(model, EmpiricalOutflow):
        return EmpiricalOutflow(model.rows.sum(axis=1, keepdims=True), model.features, model.horizon)
    raise DomainError(f"cannot consolidate {model.kind} outflows exactly")


def exceeds_with_positive_probability(model: OutflowModel, k: int, x: float) -> bool:
    """Whether P(xi_k > x) > 0, decided from the support when tails underflow."""
    return bool(model.unbounded_support or model.sf(k, x) > 0)


def _header_error(msg, line):
    return ParseError(msg, line=line)


def load_empirical(path, K: int, horizon: float = 1.0) -> EmpiricalOutflow:
    """Read an outflow CSV: header ``xi_1..xi_K`` then optional feature columns.

    Lines starting with ``#`` are ignored. Every data field must be numeric and
    every outflow nonnegative; errors carry the offending line number.
    """
    path = Path(path)
    header = None
    header_line = None
    data = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            stripped = raw.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = next(csv.reader([stripped]))
            fields = [x.strip() for x in fields]
            if header is None:
                header, header_line = fields, lineno
                expected = [f"xi_{k}" for k in range(1, K + 1)]
                if header[:K] != expected:
                    raise _header_error(f"header must start with {','.join(expected)}, got {','.join(header[:K])}", lineno)
                if len(set(header)) != len(header):
                    raise _header_error("duplicate column names in header", lineno)
                continue
            if len(fields) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(fields)}", line=lineno)
            try:
                values = [float(x) for x in fields]
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", line=lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite field", line=lineno)
            if any(v < 0 for v in values[:K]):
                raise ParseError("negative outflow", line=lineno)
            data.append(values)
    if header is None:
        raise ParseError(f"{path} has no header row")
    if not data:
        raise DomainError(f"{path} has a header (line {header_line}) but no sample rows")
    arr = np.array(data, dtype=float)
    features = {name: arr[:, j] for j, name in enumerate(header) if j >= K}
    return EmpiricalOutflow(arr[:, :K], features, horizon)


def write_empirical(path, rows, features: dict | None = None) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    features = features or {}
    K = rows.shape[1]
    names = [f"xi_{k}" for k in range(1, K + 1)] + list(features)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(rows.shape[0]):
            writer.writerow([repr(float(v)) for v in rows[i]] + [repr(float(features[n][i])) for n in features])
