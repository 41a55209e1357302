"""
Hybrid Powertrain Case Study
Requested-speed scenarios, the powertrain MPC problem and the closed-loop
comparison of deterministic, uniform-risk and optimized-risk controllers
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from core.exceptions import ConfigurationError, SolverError
from core.exlin import (
    ExlinModel,
    TransformedSpec,
    reference_trajectory,
    transform_spec,
)
from core.solver import (
    RiskProblem,
    Solution,
    SolverConfig,
    assemble,
    make_regularizer,
    solve,
    solve_deterministic,
    solve_fixed_risk,
    warm_shift,
)
from core.stacked import (
    ConstraintIndexMap,
    OffsetBuilder,
    SpecBundle,
    StackedSystem,
    Weights,
    build_lhs,
    stack_bias,
    stack_dynamics,
)
from core.uncertainty import (
    RiskBudget,
    ScenarioSet,
    empirical_violation,
    make_mode,
    mc_margin,
    uniform_allocation,
)
from utils.lookup import MonotoneLookup
from utils.powertrain_data import (
    ENGINE_TORQUE_LIMIT_TABLE,
    INPUT_CHANNELS,
    SOC_TARGET_TABLE,
    STATE_CHANNELS,
    default_exlin_parameters,
)

logger = logging.getLogger(__name__)

VARIANTS = ('deterministic', 'uniform', 'optimized')
FAMILIES = ('engine_torque', 'soc', 'motor_power')

# Channel indices
ENGINE, SPEED, SOC = 0, 1, 2
ENGINE_CMD, MOTOR, BRAKE = 0, 1, 2

VIOLATION_TOL = 1e-9


# ============================================================================
# Configuration types
# ============================================================================

@dataclass(frozen=True)
class PowertrainConfig:
    dt: float = 0.1
    N: int = 10
    n_steps: int = 120
    x0: Tuple[float, float, float] = (10.0, 60.0, 30.0)
    w_req: float = 10.0
    w_eng: float = 1e-3
    w_mot: float = 5e-5
    w_brk: float = 1e-2
    w_soc: float = 10.0
    w_delta: float = 1e-6
    soc_lo: float = 20.0
    soc_hi: float = 40.0
    motor_torque_lo: float = -200.0
    motor_torque_hi: float = 200.0
    motor_power: float = 9000.0
    brake_lo: float = 0.0
    brake_hi: float = 50.0
    engine_cmd_lo: float = 0.0
    delta_bar: float = 0.012
    n_samples: int = 1024
    n_eval_samples: int = 1024
    speed_floor: float = 1.0

    def __post_init__(self):
        if self.N < 1 or self.n_steps < 1:
            raise ConfigurationError(f"horizon and run length must be >= 1, got N={self.N}, n_steps={self.n_steps}")
        if not (self.soc_lo < self.soc_hi and self.motor_torque_lo < self.motor_torque_hi
                and self.brake_lo < self.brake_hi):
            raise ConfigurationError("powertrain bounds must be ordered lo < hi")
        if self.motor_power <= 0 or self.speed_floor <= 0:
            raise ConfigurationError(
                f"motor power ({self.motor_power}) and speed floor ({self.speed_floor}) must be positive"
            )
        if self.n_samples < 1 or self.n_eval_samples < 1:
            raise ConfigurationError("sample counts must be >= 1")
        if not 0.0 < self.delta_bar < 1.0:
            raise ConfigurationError(f"delta_bar must lie in (0, 1), got {self.delta_bar}")

    def weights(self) -> Weights:
        """Weights in transformed coordinates; only the speed channel is tracked."""
        return Weights(
            req=np.array([0.0, self.w_req, 0.0]),
            v=np.array([self.w_eng, self.w_mot, self.w_brk]),
            soft=np.full(3, self.w_soc),
            delta=self.w_delta,
        )


@dataclass(frozen=True)
class SpeedScenarioModel:
    """Piecewise-constant Gaussian requested acceleration, integrated by Euler."""

    accel_means: Tuple[float, ...] = (2.5, 0.0, -2.5, 1.2, -1.2, 2.4)
    accel_std: float = 0.15
    v0: float = 60.0
    n_steps: int = 120
    dt: float = 0.1

    def __post_init__(self):
        if not self.accel_means:
            raise ConfigurationError("speed model needs at least one interval")
        if self.accel_std < 0:
            raise ConfigurationError(f"acceleration std must be >= 0, got {self.accel_std}")
        if self.n_steps < len(self.accel_means):
            raise ConfigurationError(
                f"{self.n_steps} steps cannot hold {len(self.accel_means)} intervals"
            )

    @property
    def n_intervals(self) -> int:
        return len(self.accel_means)

    @property
    def interval_steps(self) -> int:
        return self.n_steps // self.n_intervals

    def interval(self, steps) -> np.ndarray:
        """Interval index of each step; steps past the run stay in the last interval."""
        return np.minimum(np.asarray(steps) // self.interval_steps, self.n_intervals - 1)

    def _counts(self, length: int) -> np.ndarray:
        # counts[t, j]: steps of interval j among 0..t-1
        steps = np.arange(length - 1)
        onehot = np.zeros((length - 1, self.n_intervals))
        onehot[steps, self.interval(steps)] = 1.0
        return np.vstack([np.zeros((1, self.n_intervals)), np.cumsum(onehot, axis=0)])

    def mean_profile(self, length: int) -> np.ndarray:
        return self.v0 + self.dt * self._counts(length) @ np.asarray(self.accel_means, dtype=float)

    def std_profile(self, length: int) -> np.ndarray:
        counts = self._counts(length)
        return self.dt * self.accel_std * np.sqrt(np.sum(counts ** 2, axis=1))

    def sample_true(self, length: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        accel = rng.normal(np.asarray(self.accel_means, dtype=float), self.accel_std)
        return self.v0 + self.dt * self._counts(length) @ accel


@dataclass(frozen=True, eq=False)
class PowertrainSpecMaps:
    """Requested-speed lookups for the engine-torque limit and the SoC target."""

    engine_torque_limit: MonotoneLookup
    soc_target: MonotoneLookup

    @classmethod
    def default(cls) -> 'PowertrainSpecMaps':
        return cls(
            engine_torque_limit=MonotoneLookup.from_pairs(**ENGINE_TORQUE_LIMIT_TABLE),
            soc_target=MonotoneLookup.from_pairs(**SOC_TARGET_TABLE),
        )

    def check(self, config: PowertrainConfig):
        lo, hi = self.soc_target.range
        if lo < config.soc_lo or hi > config.soc_hi:
            raise ConfigurationError(
                f"SoC target range [{lo}, {hi}] leaves the SoC box [{config.soc_lo}, {config.soc_hi}]"
            )

    def to_dict(self) -> Dict:
        return {
            'engine_torque_limit': self.engine_torque_limit.to_dict(),
            'soc_target': self.soc_target.to_dict(),
        }


def default_exlin_model() -> ExlinModel:
    model = ExlinModel.from_parameters(default_exlin_parameters())
    return ExlinModel(phi=model.phi, psi=model.psi, A=model.A, B=model.B, c=model.c,
                      names={'states': STATE_CHANNELS, 'inputs': INPUT_CHANNELS})


@dataclass(frozen=True, eq=False)
class PowertrainSetup:
    """Everything a closed-loop run needs."""

    powertrain: PowertrainConfig = field(default_factory=PowertrainConfig)
    speed_model: SpeedScenarioModel = field(default_factory=SpeedScenarioModel)
    solver: SolverConfig = field(default_factory=SolverConfig)
    exlin: ExlinModel = field(default_factory=default_exlin_model)
    spec_maps: PowertrainSpecMaps = field(default_factory=PowertrainSpecMaps.default)
    mode: str = 'mv'
    regularizer: str = 'inverse'
    input_bound_strategy: str = 'shifted'

    def __post_init__(self):
        make_mode(self.mode)
        make_regularizer(self.regularizer)
        if self.input_bound_strategy not in ('shifted', 'first_step_only'):
            raise ConfigurationError(f"unknown input-bound strategy '{self.input_bound_strategy}'")
        if self.speed_model.n_steps != self.powertrain.n_steps:
            raise ConfigurationError(
                f"speed model covers {self.speed_model.n_steps} steps, run has {self.powertrain.n_steps}"
            )
        if self.speed_model.dt != self.powertrain.dt:
            raise ConfigurationError("speed model and powertrain must share the sampling time")
        self.spec_maps.check(self.powertrain)

    @property
    def guarantee(self) -> str:
        if self.exlin.psi.state_dependent and self.input_bound_strategy == 'shifted':
            return 'conditional_on_shifted_plan'
        return 'unconditional'


# ============================================================================
# Scenarios
# ============================================================================

def sample_speed_profiles(model: SpeedScenarioModel, start: int, N: int, v_now: float, S: int,
                          rng=None, v_next: Optional[float] = None, seed: Optional[int] = None) -> ScenarioSet:
    """
    S requested-speed trajectories V(start) .. V(start+N).

    One Gaussian acceleration is drawn per interval overlapping the window
    and held inside it. When ``v_next`` is given the first step is known.
    """
    if S < 1 or N < 1:
        raise ConfigurationError(f"need S >= 1 and N >= 1, got S={S}, N={N}")
    rng = np.random.default_rng(rng)
    intervals = model.interval(start + np.arange(N))
    first = int(intervals[0])
    covered = np.arange(first, int(intervals[-1]) + 1)
    means = np.asarray(model.accel_means, dtype=float)[covered]
    accel = rng.normal(means, model.accel_std, size=(S, covered.size))

    increments = model.dt * accel[:, intervals - first]
    if v_next is not None:
        increments[:, 0] = v_next - v_now
    theta = v_now + np.concatenate([np.zeros((S, 1)), np.cumsum(increments, axis=1)], axis=1)
    if v_next is not None:
        theta[:, 1] = v_next
    return ScenarioSet(theta[:, :, None], seed=seed)


# ============================================================================
# Problem construction
# ============================================================================

class PowertrainProblem(NamedTuple):
    stacked: StackedSystem
    spec: SpecBundle
    transformed: TransformedSpec
    xi0: np.ndarray
    weights: Weights
    clamp_count: int
    theta_map: Dict[str, str]


def physical_spec(config: PowertrainConfig, spec_maps: PowertrainSpecMaps) -> SpecBundle:
    """
    Bounds in plant coordinates (tau_eng, V, -S) and (u_eng, tau_mot, tau_brk).

    SoC is carried negated so its lower target becomes an upper soft bound.
    """
    inf = np.inf
    floor = config.speed_floor

    def speed(theta):
        return np.asarray(theta, dtype=float)[..., 0]

    def stack(*columns):
        return np.stack(np.broadcast_arrays(*columns), axis=-1)

    def xi_req(theta, k):
        V = speed(theta)
        return stack(np.zeros_like(V), V, np.zeros_like(V))

    def xi_lo(theta, k):
        V = speed(theta)
        return stack(np.full_like(V, -inf), np.full_like(V, -inf), np.full_like(V, -config.soc_hi))

    def xi_hi(theta, k):
        V = speed(theta)
        return stack(spec_maps.engine_torque_limit(V), np.full_like(V, inf), np.full_like(V, -config.soc_lo))

    def xi_soft_hi(theta, k):
        V = speed(theta)
        return stack(np.full_like(V, inf), np.full_like(V, inf), -spec_maps.soc_target(V))

    def v_lo(theta, k):
        V = np.maximum(speed(theta), floor)
        motor = np.maximum(config.motor_torque_lo, -config.motor_power / V)
        return stack(np.full_like(V, config.engine_cmd_lo), motor, np.full_like(V, config.brake_lo))

    def v_hi(theta, k):
        V = np.maximum(speed(theta), floor)
        motor = np.minimum(config.motor_torque_hi, config.motor_power / V)
        return stack(np.full_like(V, inf), motor, np.full_like(V, config.brake_hi))

    return SpecBundle(
        xi_req=xi_req, xi_lo=xi_lo, xi_hi=xi_hi, v_lo=v_lo, v_hi=v_hi, xi_soft_hi=xi_soft_hi,
        theta_dependent={
            'xi_req': np.array([False, True, False]),
            'xi_hi': np.array([True, False, False]),
            'xi_soft_hi': np.array([False, False, True]),
            'v_lo': np.array([False, True, False]),
            'v_hi': np.array([False, True, False]),
        },
    )


def build_powertrain_problem(config: PowertrainConfig, spec_maps: PowertrainSpecMaps, model: ExlinModel,
                             x_now, scenarios: ScenarioSet, xi_ref=None,
                             strategy: str = 'shifted') -> PowertrainProblem:
    """Transformed-coordinate problem data for one planning instant (theta := V_req)."""
    if scenarios.n_theta != 1:
        raise ConfigurationError(f"powertrain scenarios carry a scalar speed, got n_theta={scenarios.n_theta}")
    if scenarios.horizon != config.N:
        raise ConfigurationError(f"scenario horizon {scenarios.horizon} does not match N={config.N}")

    clamp_count = int(np.sum(scenarios.samples < config.speed_floor))
    if clamp_count:
        logger.warning("%d scenario speeds clamped to the %.3g km/h floor", clamp_count, config.speed_floor)

    transformed = transform_spec(physical_spec(config, spec_maps), model)
    x_now = np.asarray(x_now, dtype=float)
    if xi_ref is None:
        xi_ref = reference_trajectory(model, x_now, None, config.N)
    spec = transformed.bind(model, xi_ref, strategy)
    stacked = stack_dynamics(model.linear_model(), config.N)
    return PowertrainProblem(
        stacked=stacked, spec=spec, transformed=transformed,
        xi0=model.phi.forward(x_now), weights=config.weights(),
        clamp_count=clamp_count, theta_map={'theta': 'requested_speed_kmh'},
    )


def family_rows(index: ConstraintIndexMap) -> Dict[str, np.ndarray]:
    """Constraint rows per reported family; 'other' collects the rest."""
    groups = {
        'engine_torque': index.rows('state_hi', ENGINE),
        'soc': index.rows('soft', SOC),
        'motor_power': np.concatenate([index.rows('input_lo', MOTOR), index.rows('input_hi', MOTOR)]),
    }
    used = np.concatenate(list(groups.values()))
    groups['other'] = np.setdiff1d(np.arange(index.n_X), used)
    return groups


def risk_by_family(problem: RiskProblem, delta: np.ndarray) -> Dict[str, float]:
    groups = family_rows(problem.index)
    out = {}
    for name in FAMILIES:
        mask = np.isin(problem.chance_rows, groups[name])
        out[name] = float(np.sum(delta[mask])) if delta.size else 0.0
    return out


# ============================================================================
# Closed loop
# ============================================================================

class MPCLog:
    """Per-step records of a closed-loop run."""

    def __init__(self, variant: str, seed: int, setup: PowertrainSetup):
        self.variant = variant
        self.seed = seed
        self.setup = setup
        self.trajectory: List[Dict] = []
        self.risk: List[Dict] = []
        self.violation: List[Dict] = []
        self.solver: List[Dict] = []
        self.last_trace: Tuple[Dict, ...] = ()
        self.first_scenarios: Optional[ScenarioSet] = None

    def __len__(self) -> int:
        return len(self.trajectory)

    def to_frames(self) -> Dict[str, pd.DataFrame]:
        return {
            'trajectory': pd.DataFrame(self.trajectory),
            'risk': pd.DataFrame(self.risk),
            'violation': pd.DataFrame(self.violation),
            'solver': pd.DataFrame(self.solver),
        }

    def summary(self) -> Dict:
        trajectory = pd.DataFrame(self.trajectory)
        violation = pd.DataFrame(self.violation)
        solver = pd.DataFrame(self.solver)
        risk = pd.DataFrame(self.risk)
        optimal = solver['status'] == 'optimal'
        config = self.setup.powertrain
        return {
            'variant': self.variant,
            'seed': self.seed,
            'steps': len(self),
            'degraded_steps': int(solver['degraded'].sum()),
            'mean_objective_quadratic': float(solver['objective_quadratic'].mean()),
            'tracking_cost_transformed': float(trajectory['tracking_cost_transformed'].sum()),
            'tracking_cost_physical': float(trajectory['tracking_cost_physical'].sum()),
            'max_joint_violation': float(violation['violation_joint'].max()),
            'mean_joint_violation': float(violation['violation_joint'].mean()),
            'violation_limit': config.delta_bar + mc_margin(config.delta_bar, config.n_eval_samples),
            'min_soc_margin': float(trajectory['soc_margin'].min()),
            'mean_soc_margin': float(trajectory['soc_margin'].mean()),
            'max_budget_gap': float((risk['risk_total'][optimal] - config.delta_bar).abs().max())
            if self.variant == 'optimized' and optimal.any() else float('nan'),
            'speed_clamps': int(solver['speed_clamps'].sum()),
        }


def _solve_variant(variant: str, setup: PowertrainSetup, stacked, spec, scenarios, weights, xi0,
                   budget: RiskBudget, warm) -> Tuple[RiskProblem, Solution, Optional[Solution]]:
    mode = make_mode(setup.mode)
    regularizer = make_regularizer(setup.regularizer)
    if variant == 'deterministic':
        problem = assemble(stacked, spec, scenarios.mean_trajectory(), mode, weights, xi0, budget, regularizer)
        return problem, solve_deterministic(problem, setup.solver, warm), None

    problem = assemble(stacked, spec, scenarios, mode, weights, xi0, budget, regularizer)
    uniform = uniform_allocation(budget, problem.n_c) if problem.n_c else np.zeros(0)
    if variant == 'uniform':
        return problem, solve_fixed_risk(problem, uniform, setup.solver, warm), None
    solution = solve(problem, setup.solver, warm)
    shadow = solve_fixed_risk(problem, uniform, setup.solver, warm)
    return problem, solution, shadow


def run_mpc(variant: str, setup: Optional[PowertrainSetup] = None, seed: int = 0) -> MPCLog:
    """
    Receding-horizon run of one controller variant.

    The plant is the exactly linearizable model itself; the requested speed
    is the only uncertainty. The true profile and every step's scenarios
    come from a SeedSequence derived from ``seed``.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant '{variant}', expected one of {VARIANTS}")
    setup = setup or PowertrainSetup()
    config = setup.powertrain
    N, n_steps = config.N, config.n_steps
    model = setup.exlin.reflect([SOC])
    linear = model.linear_model()
    budget = RiskBudget(config.delta_bar)

    root = np.random.SeedSequence(seed)
    truth_seq, steps_seq = root.spawn(2)
    step_seqs = steps_seq.spawn(n_steps)
    v_true = setup.speed_model.sample_true(n_steps + N + 1, np.random.default_rng(truth_seq))
    v_mean = setup.speed_model.mean_profile(n_steps + N + 1)
    v_std = setup.speed_model.std_profile(n_steps + N + 1)

    log = MPCLog(variant, seed, setup)
    x = np.array([config.x0[0], config.x0[1], -config.x0[2]], dtype=float)
    previous: Optional[Solution] = None
    previous_xi: Optional[np.ndarray] = None

    for t in range(n_steps):
        plan_seq, eval_seq = step_seqs[t].spawn(2)
        scenarios = sample_speed_profiles(setup.speed_model, t, N, v_true[t], config.n_samples,
                                          rng=np.random.default_rng(plan_seq), v_next=v_true[t + 1],
                                          seed=int(plan_seq.generate_state(1)[0]))
        if t == 0:
            log.first_scenarios = scenarios

        xi_ref = reference_trajectory(model, x, previous_xi, N)
        built = build_powertrain_problem(config, setup.spec_maps, model, x, scenarios, xi_ref,
                                         setup.input_bound_strategy)
        warm = warm_shift(previous) if previous is not None else None
        problem, solution, shadow = _solve_variant(variant, setup, built.stacked, built.spec, scenarios,
                                                   built.weights, built.xi0, budget, warm)
        log.last_trace = solution.trace

        degraded = solution.status != 'optimal'
        if degraded:
            logger.warning("step %d: %s solve ended with status '%s'", t, variant, solution.status)
        if solution.status == 'infeasible':
            if previous is None:
                raise SolverError(f"step {t}: infeasible first solve and no plan to fall back on")
            fallback = warm_shift(previous)
            v_hat, gamma_hat = fallback.v_hat, fallback.gamma_hat
        else:
            v_hat, gamma_hat = solution.v_hat, solution.gamma_hat

        # committed plan and its empirical violation over fresh scenarios
        c_hat = stack_bias(linear, scenarios.samples[0])
        xi_plan = built.stacked.predict(built.xi0, v_hat, c_hat)
        y = build_lhs(built.stacked, built.xi0, v_hat, gamma_hat)
        fresh = sample_speed_profiles(setup.speed_model, t, N, v_true[t], config.n_eval_samples,
                                      rng=np.random.default_rng(eval_seq), v_next=v_true[t + 1])
        index = ConstraintIndexMap.build(model.n_x, model.n_u, N)
        builder = OffsetBuilder(built.spec, linear, index)
        rates = empirical_violation(y, fresh, family_rows(index), builder, tol=VIOLATION_TOL)

        # apply the first input to the plant
        v0 = v_hat[:model.n_u]
        u0 = model.input_from_v(v0, x)
        x_next = model.step(x, u0, scenarios.samples[0, 0])

        request = v_true[t + 1]
        soc = -x_next[SOC]
        soc_target = float(setup.spec_maps.soc_target(request))
        xi_speed = model.phi.forward(x_next)[SPEED]
        xi_request = model.phi.forward(np.array([0.0, request, 0.0]))[SPEED]
        log.trajectory.append({
            'step': t,
            'time': round((t + 1) * config.dt, 10),
            'engine_torque': x_next[ENGINE],
            'speed': x_next[SPEED],
            'soc': soc,
            'engine_command': u0[ENGINE_CMD],
            'motor_torque': u0[MOTOR],
            'brake_torque': u0[BRAKE],
            'speed_request': request,
            'speed_request_mean': v_mean[t + 1],
            'speed_request_lo': v_mean[t + 1] - v_std[t + 1],
            'speed_request_hi': v_mean[t + 1] + v_std[t + 1],
            'soc_target': soc_target,
            'engine_torque_limit': float(setup.spec_maps.engine_torque_limit(request)),
            'soc_margin': soc - soc_target,
            'tracking_cost_transformed': config.w_req * (xi_speed - xi_request) ** 2,
            'tracking_cost_physical': config.w_req * (x_next[SPEED] - request) ** 2,
        })

        delta = solution.delta if variant != 'deterministic' else np.zeros(0)
        shares = risk_by_family(problem, delta) if delta.size else {name: 0.0 for name in FAMILIES}
        log.risk.append({
            'step': t,
            **{f"risk_{name}": shares[name] for name in FAMILIES},
            'risk_total': float(np.sum(delta)),
            'n_chance_rows': problem.n_c,
        })
        log.violation.append({
            'step': t,
            **{f"violation_{name}": rates[name] for name in (*FAMILIES, 'other')},
            'violation_joint': rates['joint'],
        })
        log.solver.append({
            'step': t,
            'status': solution.status,
            'degraded': degraded,
            'iterations': solution.iterations,
            'phase1_iterations': solution.phase1_iterations,
            'kkt_residual': solution.kkt_residual,
            'objective': solution.objective,
            'objective_quadratic': solution.objective_quadratic,
            'lambda': solution.lam,
            'duality_gap': solution.duality_gap,
            'uniform_objective': shadow.objective if shadow is not None and shadow.optimal else float('nan'),
            'uniform_duality_gap': shadow.duality_gap if shadow is not None and shadow.optimal else float('nan'),
            'hessian_pd': solution.hessian_pd,
            'convexity_certified': problem.convexity_certified,
            'speed_clamps': built.clamp_count,
        })

        if (t + 1) % 20 == 0:
            logger.info("%s seed=%d step %d/%d: status=%s risk=%.4g joint violation=%.4g",
                        variant, seed, t + 1, n_steps, solution.status, float(np.sum(delta)), rates['joint'])

        x = x_next
        if solution.status != 'infeasible':
            previous = solution
        previous_xi = xi_plan
    return log


def ordering_holds(solver: pd.DataFrame) -> bool:
    """
    Optimized objective against the uniform allocation, step by step.

    Only steps where both solves are optimal are compared. The slack is the
    two duality gaps plus a relative 1e-8.
    """
    both = (solver['status'] == 'optimal') & solver['uniform_objective'].notna()
    compared = solver.loc[both]
    gap = compared['objective'] - compared['uniform_objective']
    slack = (compared['duality_gap'] + compared['uniform_duality_gap']
             + 1e-8 * np.maximum(compared['uniform_objective'].abs(), 1.0))
    return bool((gap <= slack).all())


def compare_controllers(setup: Optional[PowertrainSetup] = None, seeds: Sequence[int] = (0,),
                        variants: Iterable[str] = VARIANTS, n_jobs: int = 1) -> Dict:
    """
    Run every variant on the same seeds (hence the same true profiles).

    Returns the logs keyed by (variant, seed) and a summary DataFrame with
    one row per run, plus the per-step ordering check of the optimized
    objective against the uniform allocation.
    """
    setup = setup or PowertrainSetup()
    jobs = [(variant, int(seed)) for seed in seeds for variant in variants]
    logs = Parallel(n_jobs=n_jobs)(delayed(run_mpc)(variant, setup, seed) for variant, seed in jobs)
    by_key = {key: log for key, log in zip(jobs, logs)}

    rows = []
    for (variant, seed), log in by_key.items():
        row = log.summary()
        if variant == 'optimized':
            row['ordering_holds'] = ordering_holds(pd.DataFrame(log.solver))
        else:
            row['ordering_holds'] = None
        rows.append(row)
    summary = pd.DataFrame(rows)
    return {'logs': by_key, 'summary': summary}



# ============================================================================
# Budget sweep
# ============================================================================

def _with_delta_bar(setup: PowertrainSetup, delta_bar: float) -> PowertrainSetup:
    return replace(setup, powertrain=replace(setup.powertrain, delta_bar=float(delta_bar)))


def initial_step_problem(setup: PowertrainSetup, seed: int) -> RiskProblem:
    """The optimized variant's first planning problem for a given seed."""
    config = setup.powertrain
    model = setup.exlin.reflect([SOC])
    root = np.random.SeedSequence(seed)
    truth_seq, steps_seq = root.spawn(2)
    plan_seq, _ = steps_seq.spawn(config.n_steps)[0].spawn(2)
    v_true = setup.speed_model.sample_true(config.n_steps + config.N + 1, np.random.default_rng(truth_seq))
    scenarios = sample_speed_profiles(setup.speed_model, 0, config.N, v_true[0], config.n_samples,
                                      rng=np.random.default_rng(plan_seq), v_next=v_true[1])
    x = np.array([config.x0[0], config.x0[1], -config.x0[2]], dtype=float)
    built = build_powertrain_problem(config, setup.spec_maps, model, x, scenarios, None,
                                     setup.input_bound_strategy)
    return assemble(built.stacked, built.spec, scenarios, make_mode(setup.mode), built.weights, built.xi0,
                    RiskBudget(config.delta_bar), make_regularizer(setup.regularizer))


def _sweep_point(setup: PowertrainSetup, delta_bar: float, seed: int) -> Dict:
    point = _with_delta_bar(setup, delta_bar)
    log = run_mpc('optimized', point, seed)
    summary = log.summary()
    problem = initial_step_problem(point, seed)
    first = solve(problem, point.solver)
    solver = pd.DataFrame(log.solver)
    return {
        'delta_bar': float(delta_bar),
        'mean_objective_quadratic': summary['mean_objective_quadratic'],
        'initial_objective_quadratic': first.objective_quadratic,
        'initial_regularizer': first.objective - first.objective_quadratic,
        'max_joint_violation': summary['max_joint_violation'],
        'violation_limit': summary['violation_limit'],
        'coverage_holds': bool(summary['max_joint_violation'] <= summary['violation_limit']),
        'convexity_certified': bool(solver['convexity_certified'].all()),
    }


def sweep_delta_bar(setup: Optional[PowertrainSetup] = None, values: Sequence[float] = (0.004, 0.012, 0.05),
                    seed: int = 0, n_jobs: int = 1) -> pd.DataFrame:
    """
    Optimized-variant runs over a grid of total risk budgets.

    ``monotone_holds`` compares consecutive budgets on the first planning
    problem: the quadratic part may rise only by what the regularizer gave up.
    """
    setup = setup or PowertrainSetup()
    values = sorted(float(v) for v in values)
    rows = Parallel(n_jobs=n_jobs)(delayed(_sweep_point)(setup, v, seed) for v in values)
    frame = pd.DataFrame(rows)
    monotone = [True]
    for prev, cur in zip(rows[:-1], rows[1:]):
        slack = prev['initial_regularizer'] + 1e-8 * (1.0 + abs(prev['initial_objective_quadratic']))
        monotone.append(bool(cur['initial_objective_quadratic'] <= prev['initial_objective_quadratic'] + slack))
    frame['monotone_holds'] = monotone
    return frame
