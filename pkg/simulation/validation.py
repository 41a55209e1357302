"""
Validation suites
Property checks behind `ccmpc validate`: concentration bounds, psi convexity,
solver optimality conditions and exact-linearization identities
"""

import logging
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from core.active_set import ActiveSetSolver
from core.exlin import (
    CubicMonotoneMap,
    ExlinModel,
    StateScaledInputMap,
    rollout_nonlinear,
)
from core.powertrain import (
    SOC,
    PowertrainSetup,
    SpeedScenarioModel,
    build_powertrain_problem,
    sample_speed_profiles,
)
from core.solver import (
    RiskProblem,
    SolverConfig,
    WarmStart,
    assemble,
    kkt_report,
    make_regularizer,
    solve,
    solve_deterministic,
)
from core.stacked import simulate
from core.uncertainty import (
    MODES,
    RiskBudget,
    RowMoments,
    TruncatedLogNormal,
    derivative_report,
    gaussian_law,
    make_mode,
    psi,
    psi_shape_report,
    reference_laws,
    verify_boole,
    verify_inequality_oracles,
)

logger = logging.getLogger(__name__)

DELTA_GRID = (0.01, 0.1, 0.3)


def _check(suite: str, name: str, passed: bool, detail: str = '') -> Dict:
    return {'suite': suite, 'check': name, 'passed': bool(passed), 'detail': detail}


# ============================================================================
# Random instances
# ============================================================================

def random_risk_problem(rng, n_z: int = 4, n_c: int = 3, n_det: int = 2, delta_bar: float = 0.1,
                        w_delta: float = 1e-3, mode: str = 'mv') -> RiskProblem:
    """Strictly convex instance that is strictly feasible at z = 0."""
    rng = np.random.default_rng(rng)
    M = rng.normal(size=(n_z, n_z))
    H = M.T @ M + np.eye(n_z)
    g = rng.normal(size=n_z) * 3.0
    chance_G = rng.normal(size=(n_c, n_z))
    var = rng.uniform(0.5, 2.0, size=n_c)
    mean = rng.normal(size=n_c)
    moments = RowMoments(mean=mean, var=var, lower=mean - 3.0, upper=mean + 3.0,
                         law=gaussian_law(mean, np.sqrt(var)))
    chosen = make_mode(mode)
    start = np.full(n_c, 0.5 * delta_bar / n_c)
    chance_h = np.asarray(psi(chosen, moments, start)) + rng.uniform(0.1, 1.0, size=n_c)
    det_G = rng.normal(size=(n_det, n_z))
    det_X = -rng.uniform(0.1, 1.0, size=n_det)
    return RiskProblem.from_arrays(
        H, g, chance_G=chance_G, chance_h=chance_h, chance_moments=moments,
        det_G=det_G, det_X=det_X, budget=RiskBudget(delta_bar), w_delta=w_delta, mode=chosen,
    )


def random_exlin_model(rng, n: int = 3) -> ExlinModel:
    rng = np.random.default_rng(rng)
    A = rng.normal(size=(n, n))
    A *= 0.9 / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
    phi = CubicMonotoneMap(rng.uniform(0.5, 2.0, n), rng.uniform(0.0, 0.5, n))
    psi_map = StateScaledInputMap(CubicMonotoneMap(rng.uniform(0.5, 2.0, n), rng.uniform(0.0, 0.2, n)),
                                  w=rng.normal(size=(n, n)), kappa=rng.uniform(0.0, 1.0, n))
    return ExlinModel(phi=phi, psi=psi_map, A=A, B=rng.normal(size=(n, n)) * 0.3, c=rng.normal(size=n) * 0.1)


# ============================================================================
# Suites
# ============================================================================

def suite_inequalities(n_samples: int = 100_000, seed: int = 0) -> List[Dict]:
    rng = np.random.default_rng(seed)
    checks = []
    for mode_name in MODES:
        mode = make_mode(mode_name)
        for law_name, law in reference_laws().items():
            report = verify_inequality_oracles(mode, law, DELTA_GRID, n_samples, rng, law_name)
            worst = min((c.get('coverage', 1.0) - c.get('nominal', 0.0) for c in report['checks']), default=0.0)
            checks.append(_check('inequalities', f"{mode_name}/{law_name}", report['passed'],
                                 f"worst coverage - nominal = {worst:+.4f}"))

        bounded = [TruncatedLogNormal(), reference_laws()['uniform']]
        laws = [bounded[i % 2] for i in range(20)]
        boole = verify_boole(mode, laws, [0.005] * 20, n_samples, rng)
        checks.append(_check('inequalities', f"{mode_name}/boole-20",
                             boole['passed'], f"joint {boole['joint_satisfaction']:.4f} vs {boole['nominal']:.4f}"))
    return checks


def suite_convexity() -> List[Dict]:
    rows = {
        'mv': RowMoments(mean=0.0, var=1.0),
        'bd': RowMoments(mean=0.0, var=1.0, lower=-1.0, upper=1.0),
        'cdf': RowMoments(mean=0.0, var=1.0, law=gaussian_law(0.0, 1.0)),
    }
    checks = []
    for name, row in rows.items():
        mode = make_mode(name)
        shape = psi_shape_report(mode, row)
        checks.append(_check('convexity', f"{name}/shape", shape['passed'],
                             f"delta_conv={shape['delta_conv']:.4f}"))
        deriv = derivative_report(mode, row)
        checks.append(_check('convexity', f"{name}/derivatives", deriv['passed'],
                             f"first={deriv['first_error']:.1e} second={deriv['second_error']:.1e}"))
    return checks


def suite_solver(seed: int = 0, n_instances: int = 10, n_restarts: int = 10,
                 config: Optional[SolverConfig] = None) -> List[Dict]:
    config = config or SolverConfig()
    rng = np.random.default_rng(seed)
    checks = []

    one_d = RiskProblem.from_arrays(
        [[2.0]], [0.0], chance_G=[[1.0]], chance_h=[0.0],
        chance_moments=RowMoments(mean=np.zeros(1), var=np.ones(1)),
        budget=RiskBudget(0.5), w_delta=0.0, mode='mv',
    )
    sol = solve(one_d, config)
    err = max(abs(sol.delta[0] - 0.5), abs(sol.v_hat[0] - 1.0))
    checks.append(_check('solver', 'analytic-1d', sol.optimal and err <= 1e-6, f"error {err:.1e}"))

    worst_gap, lam_ok, kkt_ok = 0.0, True, True
    for _ in range(n_instances):
        problem = random_risk_problem(rng)
        sol = solve(problem, config)
        worst_gap = max(worst_gap, abs(sol.budget_slack))
        lam_ok &= sol.optimal and sol.lam > 0
        report = kkt_report(problem, sol, config)
        kkt_ok &= report['stationarity'] <= max(config.tol_kkt, report['stationarity_floor']) and report['dual_feasible']
        if report['lipschitz_ratio'] is not None:
            kkt_ok &= report['lipschitz_ratio'] <= 1e3 and not report['status_changed']
    checks.append(_check('solver', 'budget-tightness', worst_gap <= 1e-6, f"max |1'delta - bar| {worst_gap:.1e}"))
    checks.append(_check('solver', 'lambda-positive', lam_ok))
    checks.append(_check('solver', 'kkt-and-continuity', kkt_ok))

    worst_spread = 0.0
    for _ in range(n_instances):
        problem = random_risk_problem(rng, w_delta=0.0)
        plans = []
        for _ in range(n_restarts):
            delta = rng.uniform(0.2, 1.0, problem.n_c)
            delta *= 0.5 * problem.budget.delta_bar / delta.sum()
            warm = WarmStart(v_hat=rng.normal(size=problem.n_z), gamma_hat=np.zeros(0), delta=delta)
            plans.append(solve(problem, config, warm=warm).v_hat)
        worst_spread = max(worst_spread, float(np.ptp(np.array(plans), axis=0).max()))
    checks.append(_check('solver', 'partial-uniqueness', worst_spread <= 1e-5, f"spread {worst_spread:.1e}"))

    qp = ActiveSetSolver()
    worst_qp = 0.0
    for _ in range(n_instances):
        n = 5
        M = rng.normal(size=(n, n))
        H = M.T @ M + np.eye(n)
        g = rng.normal(size=n) * 5.0
        C = rng.normal(size=(6, n))
        d = rng.uniform(0.5, 2.0, size=6)
        reference = qp.solve(H, g, C, d)
        barrier = solve_deterministic(RiskProblem.from_arrays(H, g, det_G=-C, det_X=-d), config)
        worst_qp = max(worst_qp, float(np.max(np.abs(reference['x'] - barrier.v_hat))))
    checks.append(_check('solver', 'active-set-agreement', worst_qp <= 1e-8, f"max diff {worst_qp:.1e}"))

    checks.append(degeneracy_check(config))

    squared = replace(random_risk_problem(rng, w_delta=1.0), regularizer=make_regularizer('squared'))
    sol = solve(squared, config)
    checks.append(_check('solver', 'squared-regularizer-flagged', not squared.budget_tightness_guaranteed,
                         f"budget slack {sol.budget_slack:.2e}"))
    return checks


def degeneracy_check(config: Optional[SolverConfig] = None) -> Dict:
    """Zero-variance scenarios make the stochastic and deterministic plans coincide."""
    config = config or SolverConfig()
    setup = PowertrainSetup(speed_model=SpeedScenarioModel(accel_std=0.0))
    pt = setup.powertrain
    model = setup.exlin.reflect([SOC])
    x = np.array([pt.x0[0], pt.x0[1], -pt.x0[2]])
    scenarios = sample_speed_profiles(setup.speed_model, 0, pt.N, pt.x0[1], 64, rng=0)
    built = build_powertrain_problem(pt, setup.spec_maps, model, x, scenarios)
    budget = RiskBudget(pt.delta_bar)
    stochastic = assemble(built.stacked, built.spec, scenarios, make_mode('mv'), built.weights, built.xi0, budget)
    nominal = assemble(built.stacked, built.spec, scenarios.mean_trajectory(), make_mode('mv'),
                       built.weights, built.xi0, budget)
    a = solve(stochastic, config)
    b = solve_deterministic(nominal, config)
    diff = float(np.max(np.abs(a.v_hat - b.v_hat)))
    return _check('solver', 'degeneracy-equivalence', stochastic.n_c == 0 and diff <= 1e-5,
                  f"n_c={stochastic.n_c} diff {diff:.1e}")


def suite_exlin(seed: int = 0, n_points: int = 10_000, n_instances: int = 100, N: int = 10) -> List[Dict]:
    rng = np.random.default_rng(seed)
    checks = []

    phi = CubicMonotoneMap([1.0, 0.5, 2.0], [1.0, 0.1, 0.0])
    x = rng.uniform(-5.0, 5.0, size=(n_points, 3))
    err = float(np.max(np.abs(phi.inverse(phi.forward(x)) - x)))
    checks.append(_check('exlin', 'phi-roundtrip', err <= 1e-9, f"max error {err:.1e}"))

    psi_map = StateScaledInputMap(CubicMonotoneMap([1.0, 1.0, 1.0], [0.2, 0.0, 0.05]),
                                  w=rng.normal(size=(3, 3)), kappa=[0.5, 1.0, 0.0])
    u = rng.uniform(-3.0, 3.0, size=(n_points // 10, 3))
    states = rng.normal(size=(n_points // 10, 3))
    err = max(float(np.max(np.abs(psi_map.inverse(psi_map.forward(ui, xi), xi) - ui)))
              for ui, xi in zip(u, states))
    checks.append(_check('exlin', 'psi-roundtrip', err <= 1e-9, f"max error {err:.1e}"))

    worst = 0.0
    for _ in range(n_instances):
        model = random_exlin_model(rng)
        x0 = rng.uniform(-1.0, 1.0, 3)
        u_hat = rng.uniform(-1.0, 1.0, (N, 3))
        theta = np.zeros((N + 1, 1))
        xs = rollout_nonlinear(model, x0, u_hat, theta).reshape(N, 3)
        states = np.vstack([x0, xs[:-1]])
        v_hat = np.array([model.psi.forward(u_hat[k], states[k]) for k in range(N)]).reshape(-1)
        linear = simulate(model.linear_model(), model.phi.forward(x0), v_hat, theta).reshape(N, 3)
        worst = max(worst, float(np.max(np.abs(model.phi.forward(xs) - linear))))
    checks.append(_check('exlin', 'conjugacy', worst <= 1e-8, f"max error {worst:.1e}"))

    lo = rng.uniform(-3.0, 0.0, size=(n_points, 3))
    hi = lo + rng.uniform(0.0, 3.0, size=(n_points, 3))
    pts = rng.uniform(-4.0, 4.0, size=(n_points, 3))
    inside_x = (lo <= pts) & (pts <= hi)
    inside_xi = (phi.forward(lo) <= phi.forward(pts)) & (phi.forward(pts) <= phi.forward(hi))
    checks.append(_check('exlin', 'box-equivalence', bool(np.all(inside_x == inside_xi))))
    return checks


SUITES: Dict[str, Callable[[], List[Dict]]] = {
    'inequalities': suite_inequalities,
    'convexity': suite_convexity,
    'solver': suite_solver,
    'exlin': suite_exlin,
}


def run_suites(names: Sequence[str]) -> pd.DataFrame:
    if 'all' in names:
        names = list(SUITES)
    rows: List[Dict] = []
    for name in names:
        if name not in SUITES:
            raise KeyError(name)
        logger.info("running validation suite '%s'", name)
        rows.extend(SUITES[name]())
    return pd.DataFrame(rows, columns=['suite', 'check', 'passed', 'detail'])
