"""Infinite-horizon stochastic LQ control with regime switching and cone constraints."""

from .cone import HamiltonianEval, brute_force_H, eval_H, factor_weight, project_cone
from .errors import ConeLQError
from .esre import (
    EsreSolution,
    SolverConfig,
    check_monotonicity,
    check_positivity,
    integrate_finite_horizon,
    solve_algebraic,
    solve_infinite,
    value_function,
)
from .model import (
    AssumptionReport,
    Case,
    CoefficientSet,
    ConstraintCone,
    ProblemSpec,
    RegimeGenerator,
    check_assumptions,
    coefficients_at,
    validate_generator,
)
from .portfolio import (
    MarketSpec,
    TrackingSolution,
    closed_form_single,
    closed_form_two_regime,
    optimal_portfolio,
    solve_tracking,
    to_lq,
    transformed_control,
)
from .sim import (
    CostEstimate,
    FeedbackPolicy,
    SimConfig,
    build_policy,
    perturb_policy,
    sample_regime_path,
    simulate_cost,
    stability_diagnostic,
    zero_policy,
)

__version__ = "0.1.0"
