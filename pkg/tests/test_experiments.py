import csv
import math

import numpy as np
import pytest

from orderplacement import (
    Allocation,
    DomainError,
    EmpiricalOutflow,
    ExponentialOutflow,
    FactorOutflow,
    MarketSpec,
    SAConfig,
    benchmark_allocations,
    evaluate,
)
from orderplacement.experiments import (
    CONVERGENCE_HEADER,
    FRAGMENTATION_HEADER,
    apply_parameter,
    bucket_and_solve,
    bucket_header,
    bucket_rows,
    consolidated_spec,
    evaluate_on,
    run_benchmark_table,
    run_convergence_study,
    run_fragmentation_study,
    run_sensitivity_sweep,
    tercile_boundaries,
    tercile_index,
    write_csv,
)
from orderplacement.outflows import make_rng, stream

from .conftest import F, H, LO, LU, R


@pytest.mark.parametrize(
    "model", [FactorOutflow((2200.0, 2200.0), 0.6), ExponentialOutflow((10.0, 5000.0))], ids=["factor", "exp"]
)
def test_market_only_cost_is_deterministic(two_spec, model):
    res = evaluate(Allocation(1000, (0, 0)), two_spec, model, count=1000)
    assert res.avg_cost_per_share == H + F == 230
    assert res.ci95_halfwidth == 0
    assert res.avg_filled == 1000


def test_empty_allocation_costs_shortfall_penalty(two_spec, factor_model):
    res = evaluate(Allocation(0, (0, 0)), two_spec, factor_model, count=500)
    assert res.avg_cost_per_share == LU
    assert res.avg_filled == 0


def test_ci_scales_with_count(two_spec, factor_model):
    X = Allocation(300, (400, 400))
    a = evaluate(X, two_spec, factor_model, count=20_000, seed=1)
    b = evaluate(X, two_spec, factor_model, count=40_000, seed=2)
    assert b.ci95_halfwidth / a.ci95_halfwidth == pytest.approx(1 / math.sqrt(2), rel=0.05)
    assert 0 <= a.avg_filled <= 1000 + 800


def test_evaluate_rejects_tiny_count(two_spec, factor_model):
    with pytest.raises(DomainError):
        evaluate(Allocation(0, (0, 0)), two_spec, factor_model, count=1)


def test_benchmark_allocations():
    spec = MarketSpec(H, F, (R, R), LU, LO, 900.0, (0.0, 0.0))
    b = benchmark_allocations(spec)
    assert b["X_E"] == Allocation(300, (300, 300))
    assert b["X_M"] == Allocation(900, (0, 0))
    assert b["X_L"] == Allocation(0, (900, 0))
    one = benchmark_allocations(MarketSpec(H, F, (R,), LU, LO, 1000.0, (0.0,)))
    assert one["X_L"] == Allocation(0, (1000,))
    assert sum(one["X_E"].to_array()) == 1000


def test_convergence_from_optimum_has_no_gap(single_spec, poisson_model):
    rows = run_convergence_study(
        single_spec, poisson_model, {"X_star": Allocation(728, (272,))}, [50, 500], seeds=(0, 1), eval_count=20_000
    )
    # compare against the Monte-Carlo error of the objective itself on the shared batch
    draws = poisson_model.draw(make_rng(stream(0, "convergence", "evaluation")), 20_000)
    ref = evaluate_on(Allocation(728, (272,)), single_spec, draws)
    for row in rows:
        assert set(row) == set(CONVERGENCE_HEADER)
        assert row["reference_objective"] == pytest.approx(ref.avg_cost_per_share, rel=1e-12)
        assert abs(row["gap"]) * abs(ref.avg_cost_per_share) <= 3 * ref.se


def test_convergence_gap_shrinks_with_iterations(single_spec, poisson_model):
    X0s = {"X_L": Allocation(0, (1000,))}
    rows = run_convergence_study(single_spec, poisson_model, X0s, [10, 100, 5000], seeds=range(6), eval_count=5000)
    mean_gap = {N: np.mean([r["gap"] for r in rows if r["N"] == N]) for N in (10, 100, 5000)}
    assert mean_gap[10] >= mean_gap[100] >= mean_gap[5000]


def test_convergence_is_worker_independent(single_spec, poisson_model):
    kw = dict(X0s={"X_E": Allocation(500, (500,))}, N_grid=[50], seeds=(0, 1, 2), eval_count=2000)
    assert run_convergence_study(single_spec, poisson_model, workers=1, **kw) == run_convergence_study(
        single_spec, poisson_model, workers=2, **kw
    )


def _trend(values):
    x = np.arange(len(values))
    return np.polyfit(x, np.asarray(values, dtype=float), 1)[0]


def test_sweep_lambda_u_moves_from_limit_to_market(two_spec, factor_model):
    cfg = SAConfig(iterations=3000, seed=3)
    rows = run_sensitivity_sweep(two_spec, factor_model, "lambda_u", [250, 400, 700, 1200, 2000], cfg)
    assert _trend([r["M_hat"] for r in rows]) > 0
    assert _trend([r["L1_hat"] for r in rows]) < 0
    assert _trend([r["L2_hat"] for r in rows]) < 0
    # single-venue closed-form comparison series follows the same direction
    assert _trend([r["L_single"] for r in rows]) <= 0


def test_sweep_smaller_queue_attracts_limit_orders(two_spec, factor_model):
    cfg = SAConfig(iterations=3000, seed=3)
    rows = run_sensitivity_sweep(two_spec, factor_model, "Q_1", [2100, 2000, 1900, 1800, 1700], cfg)
    assert _trend([r["L1_hat"] for r in rows]) > 0


def test_sweep_target_size_uses_limit_orders_first(factor_model):
    spec = MarketSpec(H, F, (R, R), LU, LO, 100.0, (1900.0, 2000.0))
    cfg = SAConfig(iterations=3000, seed=3)
    rows = run_sensitivity_sweep(spec, factor_model, "S", [20, 50, 400, 800, 1200], cfg)
    Ms = [r["M_hat"] / r["value"] for r in rows]
    assert Ms[0] < 0.05
    assert Ms[-1] > Ms[0] + 0.2


def test_apply_parameter_names(two_spec, factor_model):
    s, m = apply_parameter(two_spec, factor_model, "r_2", -5.0)
    assert s.r == (R, -5.0)
    s, m = apply_parameter(two_spec, factor_model, "mu_1", 1000.0)
    assert m.means == (1000.0, 2200.0)
    s, m = apply_parameter(two_spec, factor_model, "alpha", 0.2)
    assert m.alpha == 0.2
    with pytest.raises(DomainError):
        apply_parameter(two_spec, factor_model, "Q_3", 1.0)
    with pytest.raises(DomainError):
        apply_parameter(two_spec, factor_model, "gamma", 1.0)


def test_consolidated_construction(two_spec):
    cspec = consolidated_spec(two_spec)
    assert cspec.K == 1 and cspec.Q == (3900.0,)
    model = FactorOutflow((2200.0, 2200.0), 0.0)
    assert model.consolidated().mean(0) == pytest.approx(4400)
    with pytest.raises(DomainError):
        consolidated_spec(two_spec.replace(r=(20.0, 10.0)))


def test_fragmentation_rows(two_spec):
    rows = run_fragmentation_study(two_spec, 2200.0, [0.0, 1.0], SAConfig(iterations=2000), eval_count=4000)
    assert [r["alpha"] for r in rows] == [0.0, 1.0]
    for r in rows:
        assert set(r) == set(FRAGMENTATION_HEADER)
        assert r["total"] == pytest.approx(r["M_hat"] + r["L1_hat"] + r["L2_hat"])
        assert r["M_consolidated"] + r["L_consolidated"] == pytest.approx(1000)
    # perfectly correlated venues make overfilling costly: the total moves toward S
    assert abs(rows[1]["total"] - 1000) < abs(rows[0]["total"] - 1000)


def test_benchmark_table_shape_and_market_cost(two_spec):
    rows = run_benchmark_table(two_spec, [1, 2], [500, 1000], N=300, eval_count=500)
    assert len(rows) == 4
    for r in rows:
        assert r["W_XM"] == 230.0
        assert r["ci_XM"] == 0
        if r["K"] == 1:
            assert math.isnan(r["L2_frac"])
        assert r["W_Xhat"] <= min(r["W_XM"], r["W_XL"], r["W_XE"]) + 3 * max(r["ci_XL"], r["ci_XE"], r["ci_Xhat"])


def test_terciles():
    vals = np.arange(1, 10, dtype=float)
    b = tercile_boundaries(vals)
    assert b == pytest.approx((11 / 3, 19 / 3))
    assert list(tercile_index(vals, b)) == [0, 0, 0, 1, 1, 1, 2, 2, 2]


def _bucketed_data(n, rng, K=2):
    v = rng.uniform(1000, 3000, size=(n, K))
    xi = rng.poisson(v).astype(float)
    features = {f"v_{k + 1}": v[:, k] for k in range(K)}
    return EmpiricalOutflow(xi, features)


def test_bucketing_builds_81_buckets(two_spec):
    rng = np.random.default_rng(0)
    n = 8100
    xi = rng.poisson(2200, size=(n, 2)).astype(float)
    feats = {name: rng.uniform(0, 1, n) for name in ("q_1", "q_2", "v_1", "v_2")}
    feats["q_1"] = rng.uniform(1500, 2500, n)
    feats["q_2"] = rng.uniform(1500, 2500, n)
    table = bucket_and_solve(EmpiricalOutflow(xi, feats), two_spec, SAConfig(iterations=50, eval_count=100))
    assert len(table.buckets) == 81
    assert all(not b.flagged for b in table.buckets.values())
    assert sum(b.rows for b in table.buckets.values()) == n
    # queue sizes follow each bucket's median queue feature
    low = table.buckets[(0, 0, 0, 0)]
    high = table.buckets[(2, 2, 0, 0)]
    assert low.Q[0] < 2000 < high.Q[0]
    rows = bucket_rows(table, 2)
    assert len(rows) == 81 and set(rows[0]) == set(bucket_header(2))


def test_bucketing_constant_features_collapse(two_spec):
    xi = np.random.default_rng(1).poisson(2200, size=(60, 2)).astype(float)
    model = EmpiricalOutflow(xi, {"v_1": np.full(60, 5.0), "v_2": np.full(60, 7.0)})
    table = bucket_and_solve(model, two_spec, SAConfig(iterations=50, eval_count=100))
    assert list(table.buckets) == [(0, 0)]
    assert table.lookup({"v_1": 5.0, "v_2": 7.0}).rows == 60


def test_bucketing_flags_small_buckets(two_spec):
    xi = np.random.default_rng(2).poisson(2200, size=(4, 2)).astype(float)
    model = EmpiricalOutflow(xi, {"v_1": np.array([1.0, 2.0, 3.0, 4.0])})
    table = bucket_and_solve(model, two_spec, SAConfig(iterations=20, eval_count=10))
    flagged = [b for b in table.buckets.values() if b.flagged]
    assert flagged and all(b.allocation is None for b in flagged)


def test_bucketing_unknown_feature(two_spec):
    model = EmpiricalOutflow([[1.0, 2.0]] * 3, {"v_1": [1.0, 2.0, 3.0]})
    with pytest.raises(DomainError):
        bucket_and_solve(model, two_spec, features=["v_9"])


def test_high_volume_bucket_gets_more_limit_orders(two_spec):
    model = _bucketed_data(9000, np.random.default_rng(3))
    table = bucket_and_solve(model, two_spec, SAConfig(iterations=3000, seed=1, eval_count=200))
    L1 = {key: b.allocation.L[0] for key, b in table.buckets.items()}
    for j in range(3):
        assert L1[(2, j)] > L1[(0, j)]


def test_csv_output_is_byte_stable(tmp_path, two_spec):
    rows = run_fragmentation_study(two_spec, 2200.0, [0.5], SAConfig(iterations=200), eval_count=500)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(a, rows, FRAGMENTATION_HEADER)
    rows2 = run_fragmentation_study(two_spec, 2200.0, [0.5], SAConfig(iterations=200), eval_count=500)
    write_csv(b, rows2, FRAGMENTATION_HEADER)
    assert a.read_bytes() == b.read_bytes()
    with a.open() as fh:
        parsed = list(csv.DictReader(fh))
    assert float(parsed[0]["M_hat"]) == rows[0]["M_hat"]


def test_evaluate_on_matches_manual_average(two_spec):
    draws = np.random.default_rng(0).poisson(2200, size=(100, 2)).astype(float)
    res = evaluate_on(Allocation(300, (400, 400)), two_spec, draws)
    from .oracles import cost

    manual = np.mean([cost(300, (400, 400), d, H, F, (R, R), LU, LO, 1000, (1900, 2000)) for d in draws]) / 1000
    assert res.avg_cost_per_share == pytest.approx(manual, rel=1e-12)
