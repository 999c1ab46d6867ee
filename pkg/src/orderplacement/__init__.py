"""Optimal splitting of a buy order across market and limit orders on K venues."""

from .analytic import (
    SingleExchangeSolution,
    TwoExchangeSolution,
    check_corollary_preconditions,
    solve_single,
    solve_two,
)
from .errors import (
    ConfigError,
    DomainError,
    NumericalError,
    OrderPlacementError,
    ParseError,
    PreconditionError,
    RootNotFoundError,
)
from .experiments import (
    EvaluationResult,
    benchmark_allocations,
    bucket_and_solve,
    evaluate,
    run_benchmark_table,
    run_convergence_study,
    run_fragmentation_study,
    run_sensitivity_sweep,
)
from .market import (
    Allocation,
    MarketSpec,
    OutcomeIndicators,
    feasible_set_contains,
    limit_fill,
    outcome_indicators,
    realized_cost,
    total_filled,
    truncate_to_C,
    validate_assumptions,
)
from .outflows import (
    EmpiricalOutflow,
    ExponentialOutflow,
    FactorOutflow,
    ParetoOutflow,
    PoissonOutflow,
    SampleBatch,
    cdf,
    load_empirical,
    quantile,
    sample,
    stream,
)
from .sa import SAConfig, SAReport, default_step, solve_sa, stochastic_gradient
from .verification import (
    DualReport,
    KKTReport,
    brute_force_solve,
    check_prop4_preconditions,
    estimate_kkt,
    overfill_predicate_two,
    solve_constrained,
)

__version__ = "0.1.0"
