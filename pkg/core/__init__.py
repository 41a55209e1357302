"""
Core chance-constrained MPC components
"""

__version__ = '0.3.0'

from core.exceptions import (
    CCMPCError,
    ConfigurationError,
    DomainError,
    RangeError,
    SingularityError,
    SolverError,
)
from core.stacked import (
    ConstraintIndexMap,
    LinearModel,
    SpecBundle,
    StackedSystem,
    Weights,
    build_objective,
    build_offset,
    stack_bias,
    stack_dynamics,
)
from core.uncertainty import (
    RiskBudget,
    ScenarioSet,
    empirical_violation,
    estimate_moments,
    make_mode,
    psi,
)
from core.solver import (
    RiskProblem,
    Solution,
    SolverConfig,
    assemble,
    kkt_report,
    solve,
    solve_deterministic,
    solve_fixed_risk,
    warm_shift,
)
from core.exlin import ExlinModel, rollout_nonlinear, transform_spec

from core.powertrain import PowertrainSetup, compare_controllers, run_mpc

__all__ = [
    '__version__',
    'CCMPCError',
    'ConfigurationError',
    'DomainError',
    'RangeError',
    'SingularityError',
    'SolverError',
    'ConstraintIndexMap',
    'LinearModel',
    'SpecBundle',
    'StackedSystem',
    'Weights',
    'build_objective',
    'build_offset',
    'stack_bias',
    'stack_dynamics',
    'RiskBudget',
    'ScenarioSet',
    'empirical_violation',
    'estimate_moments',
    'make_mode',
    'psi',
    'RiskProblem',
    'Solution',
    'SolverConfig',
    'assemble',
    'kkt_report',
    'solve',
    'solve_deterministic',
    'solve_fixed_risk',
    'warm_shift',
    'ExlinModel',
    'rollout_nonlinear',
    'transform_spec',
    'PowertrainSetup',
    'compare_controllers',
    'run_mpc',
]
