"""
Shared fixtures for the ccmpc test suite.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from core.stacked import LinearModel, SpecBundle, Weights, constant, of_theta  # noqa: E402
from core.uncertainty import RiskBudget, RowMoments, ScenarioSet  # noqa: E402

SHORT_STEPS = 6
SHORT_HORIZON = 4


def make_scalar_model(a=0.9, b=1.0, bias=None) -> LinearModel:
    """xi+ = a xi + b v (+ bias(theta))."""
    return LinearModel([[a]], [[b]], bias=bias)


def make_random_model(seed=0, n_xi=2, n_v=2, theta_bias=False) -> LinearModel:
    """Stable random (A, B); with theta_bias the bias is 0.1 * theta on every channel."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n_xi, n_xi))
    A *= 0.8 / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
    B = rng.normal(size=(n_xi, n_v))
    bias = None
    if theta_bias:
        bias = lambda theta: 0.1 * np.repeat(np.asarray(theta)[..., :1], n_xi, axis=-1)
    return LinearModel(A, B, bias=bias)


def make_speed_limit_spec(n_xi=1, n_v=1, limit=5.0, slope=1.0, input_box=10.0) -> SpecBundle:
    """Upper state bound limit + slope * theta on every channel, fixed input box."""
    return SpecBundle.unbounded(n_xi, n_v).with_bounds(
        xi_hi=of_theta(lambda theta: limit + slope * np.repeat(np.asarray(theta)[..., :1], n_xi, axis=-1)),
        v_lo=constant(np.full(n_v, -input_box)),
        v_hi=constant(np.full(n_v, input_box)),
        theta_dependent={'xi_hi': np.ones(n_xi, dtype=bool)},
    )


def make_weights(n_xi=1, n_v=1, req=1.0, v=0.1, soft=1.0, delta=1e-3) -> Weights:
    return Weights(req=np.full(n_xi, req), v=np.full(n_v, v), soft=np.full(n_xi, soft), delta=delta)


def make_scenarios(S=200, N=SHORT_HORIZON, seed=0, std=0.5) -> ScenarioSet:
    """Gaussian random-walk scalar parameter starting at 0."""
    rng = np.random.default_rng(seed)
    steps = rng.normal(0.0, std, size=(S, N))
    theta = np.concatenate([np.zeros((S, 1)), np.cumsum(steps, axis=1)], axis=1)
    return ScenarioSet(theta[:, :, None], seed=seed)


def make_one_row_problem(delta_bar=0.5, w_delta=0.0, mode='mv'):
    """min v^2 s.t. psi(delta) <= v with a unit-variance row: optimum delta = delta_bar, v = psi."""
    from core.solver import RiskProblem
    return RiskProblem.from_arrays(
        [[2.0]], [0.0], chance_G=[[1.0]], chance_h=[0.0],
        chance_moments=RowMoments(mean=np.zeros(1), var=np.ones(1)),
        budget=RiskBudget(delta_bar), w_delta=w_delta, mode=mode,
    )


def make_short_setup(n_steps=SHORT_STEPS, N=SHORT_HORIZON, n_samples=64, n_eval_samples=128, **overrides):
    """PowertrainSetup small enough for unit tests."""
    from core.powertrain import PowertrainConfig, PowertrainSetup, SpeedScenarioModel
    powertrain = PowertrainConfig(N=N, n_steps=n_steps, n_samples=n_samples, n_eval_samples=n_eval_samples)
    speed_model = SpeedScenarioModel(n_steps=n_steps)
    return PowertrainSetup(powertrain=powertrain, speed_model=speed_model, **overrides)


def short_run_config(**overrides) -> dict:
    """RunConfig dict matching make_short_setup."""
    data = {
        'powertrain': {'N': SHORT_HORIZON, 'n_steps': SHORT_STEPS, 'n_samples': 64, 'n_eval_samples': 128},
        'speed_model': {'n_steps': SHORT_STEPS},
        'seed': 3,
    }
    data.update(overrides)
    return data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def scalar_model():
    return make_scalar_model()


@pytest.fixture
def scenarios():
    return make_scenarios()


@pytest.fixture
def short_setup():
    return make_short_setup()
