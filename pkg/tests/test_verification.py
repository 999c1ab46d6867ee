import math
import warnings

import numpy as np
import pytest

from orderplacement import (
    Allocation,
    DomainError,
    EmpiricalOutflow,
    MarketSpec,
    PoissonOutflow,
    SAConfig,
    brute_force_solve,
    estimate_kkt,
    overfill_predicate_two,
    solve_sa,
    solve_two,
)
from orderplacement.market import costs, total_filled
from orderplacement.verification import (
    KKTReport,
    check_prop4_preconditions,
    conditional_target,
    dual_grids,
    shortfall_target,
    solve_constrained,
)

from .conftest import F, H, LO, LU, R
from .oracles import poisson_cdf


def test_targets_from_prices(two_spec):
    assert shortfall_target(two_spec) == pytest.approx(0.94)
    assert conditional_target(two_spec, 0) == pytest.approx(0.04)
    spec = two_spec.replace(r=(20.0, -10.0))
    assert conditional_target(spec, 1) == pytest.approx((LO - (H - 10)) / (LU + LO))


def test_kkt_single_exchange_matches_exact_probabilities(single_spec, poisson_model):
    rep = estimate_kkt(Allocation(728, (272,)), single_spec, poisson_model, count=100_000, seed=1)
    # A < S exactly when the limit order is not completely filled: xi <= 2272
    exact = poisson_cdf(2272, 2200)
    assert rep.shortfall_prob_hat == pytest.approx(exact, abs=3 * math.sqrt(exact * (1 - exact) / 1e5))
    # a complete fill lands exactly on S, so the conditional shortfall is zero
    assert rep.conditional_shortfall_hat[0] == 0.0
    assert rep.overfill_prob_hat == 0.0


def test_single_exchange_discrete_optimality_brackets_target(single_spec):
    # for a lattice law the first-order condition is a bracket on the shortfall probability
    target = shortfall_target(single_spec)
    assert poisson_cdf(2271, 2200) < (2 * H + F + R) / (LU + H + R) <= poisson_cdf(2272, 2200)
    assert 1 - poisson_cdf(2272, 2200) < 1 - (2 * H + F + R) / (LU + H + R)
    assert 0.9 < target < 1


def test_kkt_two_exchange_interior_solution(interior_two):
    spec, model = interior_two
    sol = solve_two(spec, model)
    rep = estimate_kkt(sol.allocation, spec, model, count=100_000, seed=3)
    assert rep.in_C
    assert rep.residuals_within(3.0), rep.failures(3.0)
    assert rep.target_shortfall == pytest.approx((H + F + spec.lambda_o) / (spec.lambda_u + spec.lambda_o))


def test_kkt_is_worker_independent(interior_two):
    spec, model = interior_two
    X = solve_two(spec, model).allocation
    a = estimate_kkt(X, spec, model, count=60_000, seed=2, workers=1)
    b = estimate_kkt(X, spec, model, count=60_000, seed=2, workers=2)
    assert a.to_dict() == b.to_dict()
    assert KKTReport.from_dict(a.to_dict()) == a


def test_kkt_flags_zero_limit_when_fill_probability_is_high(two_spec):
    # a venue with no queue is touched alone often; leaving it empty is not optimal
    spec = two_spec.replace(Q=(0.0, 5000.0))
    rep = estimate_kkt(Allocation(1000, (0, 0)), spec, PoissonOutflow((2200.0, 2200.0)), count=5000)
    assert rep.condition9_holds[0]
    assert any("L_1=0 cannot be optimal" in n for n in rep.notes)
    # no full fills when L = 0 and Q is far away: conditional undefined, not invented
    assert rep.conditional_shortfall_hat[1] is None


def test_kkt_warns_outside_C(two_spec):
    with pytest.warns(UserWarning):
        rep = estimate_kkt(Allocation(0, (10, 10)), two_spec, PoissonOutflow((2200.0, 2200.0)), count=2000)
    assert not rep.in_C


def test_kkt_rejects_small_count(two_spec):
    with pytest.raises(DomainError):
        estimate_kkt(Allocation(1000, (0, 0)), two_spec, PoissonOutflow((2200.0, 2200.0)), count=10)


def test_prop4_preconditions(two_spec):
    assert check_prop4_preconditions(two_spec, PoissonOutflow((2200.0, 2200.0))) == []
    bounded = EmpiricalOutflow([[100.0, 100.0], [200.0, 300.0]])
    names = [v.name for v in check_prop4_preconditions(two_spec, bounded)]
    assert "fill-tail" in names
    # F(Q) > 0 on both venues, so a large enough penalty breaks the cap
    spec = two_spec.replace(lambda_u=1e30)
    assert [v.name for v in check_prop4_preconditions(spec, PoissonOutflow((2200.0, 2200.0)))] == ["penalty-cap"]


def test_overfill_predicate_equivalence(two_spec):
    rng = np.random.default_rng(17)
    n = 100_000
    S = two_spec.S
    M = rng.uniform(1, S - 1, n)
    L = rng.uniform(0, 1, (n, 2)) * (S - M)[:, None]
    keep = M + L.sum(axis=1) > S
    M, L = M[keep], L[keep]
    xi = rng.uniform(1500, 3500, (M.size, 2))
    for i in range(M.size):
        X = (M[i], L[i, 0], L[i, 1])
        assert overfill_predicate_two(X, xi[i], two_spec) == (total_filled(X, xi[i], two_spec) > S)


def test_overfill_predicate_corner_cases(two_spec):
    X = (300.0, 500.0, 500.0)
    assert not overfill_predicate_two(X, (0.0, 0.0), two_spec)
    assert overfill_predicate_two(X, (1e6, 1e6), two_spec)
    with pytest.raises(DomainError):
        overfill_predicate_two((1, 1), (1,), MarketSpec(H, F, (R,), LU, LO, 1000.0, (0.0,)))


def test_dual_grid_respects_a2(two_spec):
    grid_u, grid_o = dual_grids(two_spec)
    assert grid_o[0] > H + R
    assert grid_u[-1] == pytest.approx(1e3 * (H + F))
    assert len(grid_u) == len(grid_o) == 25


def test_dual_vacuous_constraints_price_at_bottom(single_spec, poisson_model):
    cfg = SAConfig(iterations=300, seed=0)
    rep = solve_constrained(single_spec, 1000.0, 1000.0, poisson_model, cfg, grid_points=9, eval_count=4000)
    grid_u, grid_o = dual_grids(single_spec, 9)
    assert rep.lambda_u_star == grid_u[0]
    assert rep.lambda_o_star == grid_o[0]
    assert not rep.infeasible


def test_dual_binding_shortfall_constraint(single_spec, poisson_model):
    cfg = SAConfig(iterations=300, seed=0)
    mu_u = 20.0
    rep = solve_constrained(single_spec, mu_u, 1000.0, poisson_model, cfg, grid_points=13, eval_count=4000)
    if not rep.infeasible:
        assert rep.achieved_shortfall_u <= mu_u + 3 * rep.shortfall_se + 1e-9
        # re-evaluate on an independent batch
        xi = poisson_model.draw(np.random.default_rng(99), 20_000)
        A = rep.X_star.M + np.minimum(np.maximum(xi[:, 0] - 2000, 0), rep.X_star.L[0])
        short = np.maximum(1000 - A, 0)
        se = math.hypot(rep.shortfall_se, short.std() / math.sqrt(short.size))
        assert abs(short.mean() - rep.achieved_shortfall_u) <= 3 * se + 1e-9
    else:
        assert "not attained" in rep.status


def test_dual_concavity_probe(single_spec, poisson_model):
    # phi(l) = min_X E[v_l] - l mu is concave in l; probe a midpoint against its chord
    xi = poisson_model.draw(np.random.default_rng(5), 20_000)
    mu_u, mu_o = 30.0, 1000.0

    def phi(lu):
        s = single_spec.replace(lambda_u=lu)
        cfg = SAConfig(iterations=2000, seed=1)
        rep = solve_sa(s, poisson_model, cfg, eval_draws=xi)
        c = costs(rep.X_hat, xi, s)
        return c.mean() - lu * mu_u - s.lambda_o * mu_o, c.std() / math.sqrt(c.size)

    (a, sa), (b, sb), (m, sm) = phi(300.0), phi(3000.0), phi(1650.0)
    assert m >= (a + b) / 2 - 3 * math.sqrt(sa**2 + sb**2 + sm**2)


def test_dual_rejects_nonpositive_levels(single_spec, poisson_model):
    with pytest.raises(DomainError):
        solve_constrained(single_spec, 0.0, 10.0, poisson_model)


def test_brute_force_single_exchange(single_spec, poisson_model):
    res = brute_force_solve(single_spec, poisson_model, step=8, count=100_000, seed=0)
    assert abs(res.allocation.M - 728) <= 8
    assert abs(res.allocation.L[0] - 272) <= 8


def test_brute_force_all_limit_regime(single_spec, poisson_model):
    res = brute_force_solve(single_spec.replace(lambda_u=100.0), poisson_model, step=10, count=20_000)
    assert res.allocation.to_array().tolist() == [0.0, 1000.0]


def test_brute_force_versus_sa_objective(two_spec, factor_model):
    draws = factor_model.draw(np.random.default_rng(0), 50_000)
    bf = brute_force_solve(two_spec, factor_model, step=10, draws=draws)
    sa = solve_sa(two_spec, factor_model, SAConfig(iterations=5000, seed=0), eval_draws=draws)
    diff = (costs(sa.X_hat, draws, two_spec) - costs(bf.allocation, draws, two_spec)) / two_spec.S
    # Lipschitz bound per share for a half-step offset in every coordinate
    lipschitz = math.sqrt(3) * 5 * (H + F + LU + LO) / two_spec.S
    assert abs(diff.mean()) <= lipschitz + 3 * diff.std() / math.sqrt(diff.size) + 0.5


def test_brute_force_limits(two_spec):
    spec4 = MarketSpec(H, F, (R,) * 4, LU, LO, 1000.0, (1.0,) * 4)
    with pytest.raises(DomainError):
        brute_force_solve(spec4, PoissonOutflow((1.0,) * 4), count=10)
    res = brute_force_solve(two_spec, PoissonOutflow((2200.0, 2200.0)), step=400, count=1000)
    assert res.warnings
