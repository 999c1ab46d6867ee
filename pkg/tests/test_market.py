import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orderplacement import (
    Allocation,
    DomainError,
    MarketSpec,
    feasible_set_contains,
    limit_fill,
    outcome_indicators,
    realized_cost,
    total_filled,
    truncate_to_C,
    validate_assumptions,
)
from orderplacement.market import costs, fills, lower_cost_bound, project_to_C

from .conftest import F, H, LO, LU, R
from .oracles import cost as oracle_cost


def spec2(**kw):
    base = dict(h=H, f=F, r=(R, R), lambda_u=LU, lambda_o=LO, S=1000.0, Q=(1000.0, 2000.0))
    base.update(kw)
    return MarketSpec(**base)


@pytest.mark.parametrize("xi,expected", [(1500, 0), (3500, 1000), (2500, 500)])
def test_limit_fill_examples(xi, expected):
    assert limit_fill(xi, 2000, 1000) == expected


def test_limit_fill_rejects_negative():
    with pytest.raises(DomainError):
        limit_fill(-1, 2000, 1000)


def test_total_filled_examples():
    spec = spec2()
    assert total_filled(Allocation(100, (500, 300)), (1200, 1900), spec) == 300
    assert total_filled(Allocation(1000, (0, 0)), (5000, 5000), spec) == 1000
    assert total_filled(Allocation(0, (0, 0)), (5000, 5000), spec) == 0


def test_total_filled_dimension_mismatch():
    with pytest.raises(DomainError):
        total_filled(Allocation(0, (1, 2, 3)), (1, 2), spec2())
    with pytest.raises(DomainError):
        total_filled(Allocation(0, (1, 2)), (1, 2, 3), spec2())


def test_realized_cost_examples():
    spec = spec2()
    assert realized_cost(Allocation(1000, (0, 0)), (123, 4567), spec) == 230_000
    one = MarketSpec(H, F, (R,), LU, LO, 1000, (2000,))
    assert realized_cost(Allocation(0, (0,)), (1500,), one) == 260_000
    assert realized_cost(Allocation(0, (1000,)), (3500,), one) == -220_000


def test_costs_batch_matches_single_draws():
    spec = spec2()
    X = Allocation(200, (500, 600))
    rng = np.random.default_rng(3)
    xi = rng.uniform(0, 4000, size=(50, 2))
    batch = costs(X, xi, spec)
    assert np.allclose(batch, [realized_cost(X, row, spec) for row in xi], rtol=0, atol=1e-9)


def test_outcome_indicator_examples():
    one = MarketSpec(H, F, (R,), LU, LO, 1000, (2000,))
    ind = outcome_indicators(Allocation(1000, (0,)), (2500,), one)
    assert (ind.under_target, ind.over_target, ind.full_fill) == (False, False, (True,))
    ind = outcome_indicators(Allocation(0, (1000,)), (3500,), one)
    assert (ind.under_target, ind.over_target, ind.full_fill) == (False, False, (True,))
    ind = outcome_indicators(Allocation(0, (1000,)), (1500,), one)
    assert (ind.under_target, ind.over_target, ind.full_fill) == (True, False, (False,))


def test_feasible_set_examples():
    one = MarketSpec(H, F, (R,), LU, LO, 1000, (2000,))
    assert feasible_set_contains(Allocation(1000, (0,)), one)
    assert not feasible_set_contains(Allocation(0, (500,)), one)
    assert not feasible_set_contains(Allocation(500, (1000,)), one)


def test_truncate_examples():
    one = MarketSpec(H, F, (R,), LU, LO, 1000, (2000,))
    assert truncate_to_C(Allocation(1100, (0,)), one) == Allocation(1000, (0,))
    assert truncate_to_C(Allocation(0, (0,)), one) == Allocation(0, (1000,))
    X = Allocation(300, (700,))
    assert truncate_to_C(X, one) == X


def test_validate_assumptions_examples():
    assert [v.name for v in validate_assumptions(MarketSpec(50, F, (-60,), LU, LO, 1000, (0,)))] == ["A1"]
    assert validate_assumptions(spec2()) == []
    violations = validate_assumptions(spec2(lambda_o=H + R))
    assert [v.name for v in violations] == ["A2"]
    assert "lambda_o" in violations[0].detail


def test_spec_rejects_bad_inputs():
    with pytest.raises(DomainError):
        spec2(S=0)
    with pytest.raises(DomainError):
        spec2(Q=(-1, 0))
    with pytest.raises(DomainError):
        spec2(r=(R,))
    with pytest.raises(DomainError):
        Allocation(-1, (0,))


def test_spec_and_allocation_round_trip():
    spec = spec2()
    assert MarketSpec.from_dict(spec.to_dict()) == spec
    X = Allocation(1.5, (2.0, 3.0))
    assert Allocation.from_dict(X.to_dict()) == X


# property tests

S = 1000.0
SPEC = spec2()
component = st.floats(0, 1.5 * S, allow_nan=False)
outflow = st.floats(0, 5000, allow_nan=False)
alloc = st.tuples(component, component, component)
xis = st.tuples(outflow, outflow)


@settings(max_examples=300, deadline=None)
@given(alloc, alloc, xis, st.floats(0, 1))
def test_pathwise_convexity(x, y, xi, theta):
    x, y = np.array(x), np.array(y)
    lhs = costs(theta * x + (1 - theta) * y, xi, SPEC)
    rhs = theta * costs(x, xi, SPEC) + (1 - theta) * costs(y, xi, SPEC)
    assert lhs <= rhs + 1e-7 * (1 + abs(rhs))


@settings(max_examples=300, deadline=None)
@given(alloc, xis)
def test_lower_bound_and_fill_bounds(x, xi):
    v = costs(x, xi, SPEC)
    assert v >= lower_cost_bound(SPEC) - 1e-9
    f = fills(x, xi, SPEC)
    assert np.all(f >= 0) and np.all(f <= np.array(x[1:]))
    A = total_filled(x, xi, SPEC)
    assert x[0] <= A <= sum(x) + 1e-9


@settings(max_examples=200, deadline=None)
@given(alloc, xis, st.integers(0, 2), st.floats(0, 500))
def test_total_filled_monotone(x, xi, i, bump):
    base = total_filled(x, xi, SPEC)
    up = list(x)
    up[i] += bump
    assert total_filled(up, xi, SPEC) >= base
    if i < 2:
        more = list(xi)
        more[i] += bump
        assert total_filled(x, more, SPEC) >= base


@settings(max_examples=300, deadline=None)
@given(alloc, xis)
def test_cost_matches_oracle_and_indicators(x, xi):
    v = costs(x, xi, SPEC)
    ref = oracle_cost(x[0], x[1:], xi, H, F, (R, R), LU, LO, S, SPEC.Q)
    assert v == pytest.approx(ref, rel=1e-12, abs=1e-6)
    # rebuild the cost from fills and the indicator events
    ind = outcome_indicators(x, xi, SPEC)
    f = fills(x, xi, SPEC)
    A = x[0] + f.sum()
    rebuilt = (H + F) * x[0] - (H + R) * f.sum()
    if ind.under_target:
        rebuilt += LU * (S - A)
    if ind.over_target:
        rebuilt += LO * (A - S)
    assert rebuilt == pytest.approx(v, rel=1e-12, abs=1e-6)
    assert not (ind.under_target and ind.over_target)


@settings(max_examples=300, deadline=None)
@given(st.tuples(st.floats(0, S), component, component), xis)
def test_truncation_capping_dominates(x, xi):
    # capping M at S and each L_k at S - M never raises the realized cost
    capped = np.array(x)
    capped[0] = min(capped[0], S)
    capped[1:] = np.minimum(capped[1:], S - capped[0])
    assert costs(capped, xi, SPEC) <= costs(x, xi, SPEC) + 1e-7


def test_truncation_padding_does_not_raise_expected_cost():
    rng = np.random.default_rng(11)
    xi = rng.poisson(2200, size=(20_000, 2)).astype(float)
    spec = spec2(Q=(1900, 2000))
    for _ in range(50):
        x = rng.uniform(0, 300, size=3)
        t = truncate_to_C(x, spec).to_array()
        assert feasible_set_contains(t, spec)
        assert costs(t, xi, spec).mean() <= costs(x, xi, spec).mean() + 1e-9


@settings(max_examples=200, deadline=None)
@given(st.tuples(st.floats(-500, 1500), st.floats(-500, 1500), st.floats(-500, 1500)))
def test_euclidean_projection_is_feasible_and_nearest(y):
    y = np.array(y)
    p = project_to_C(y, S)
    assert feasible_set_contains(p, SPEC, tol=1e-7)
    # no feasible vertex or truncation is closer than the projection
    others = [np.array([S, 0, 0]), np.array([0, S, S]), np.array([0, S, 0]), np.array([0, 0, S])]
    others.append(truncate_to_C(np.maximum(y, 0), SPEC).to_array())
    d = np.linalg.norm(p - y)
    assert all(d <= np.linalg.norm(o - y) + 1e-6 for o in others)


ONE = MarketSpec(H, F, (R,), LU, LO, S, (2000.0,))
in_C_single = st.floats(0, S).flatmap(lambda m: st.tuples(st.just(m), st.just(S - m)))


@settings(max_examples=300, deadline=None)
@given(in_C_single, in_C_single, st.floats(0, 5000), st.floats(0, 1))
def test_single_venue_convexity_on_C(x, y, xi, theta):
    # with one venue C forbids overfilling, so only the concave fill term remains
    x, y = np.array(x), np.array(y)
    lhs = costs(theta * x + (1 - theta) * y, (xi,), ONE)
    rhs = theta * costs(x, (xi,), ONE) + (1 - theta) * costs(y, (xi,), ONE)
    assert lhs <= rhs + 1e-7 * (1 + abs(rhs))
