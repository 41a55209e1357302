"""
Tests for core/solver.py

Validates problem assembly, the barrier solver on analytic and random
instances, the deterministic and fixed-risk baselines, warm starts,
infeasibility certificates and the KKT report.
"""

import numpy as np
import pytest

from core.active_set import ActiveSetSolver
from core.exceptions import ConfigurationError
from core.solver import (
    STATUSES,
    RiskProblem,
    SolverConfig,
    assemble,
    kkt_report,
    make_regularizer,
    solve,
    solve_deterministic,
    solve_fixed_risk,
    warm_shift,
)
from core.stacked import ConstraintIndexMap, OffsetBuilder, build_lhs, constant, stack_dynamics
from core.uncertainty import RiskBudget, RowMoments, empirical_violation, mc_margin, uniform_allocation
from simulation.validation import random_risk_problem
from tests.conftest import (
    make_one_row_problem,
    make_scalar_model,
    make_scenarios,
    make_speed_limit_spec,
    make_weights,
)

N = 4


# ═══════════════════════════════════════════════════════════════════════════════
# Helpers
# ═══════════════════════════════════════════════════════════════════════════════

def _tracking_problem(S=200, delta_bar=0.1, mode='mv', regularizer=None, w_delta=1e-3, seed=0):
    """Scalar plant asked to track 8 under an upper bound 5 + theta: the chance rows bind."""
    stacked = stack_dynamics(make_scalar_model(), N)
    spec = make_speed_limit_spec().with_bounds(xi_req=constant([8.0]))
    weights = make_weights(req=1.0, v=0.1, soft=1.0, delta=w_delta)
    reg = make_regularizer(regularizer) if regularizer else None
    scenarios = make_scenarios(S=S, N=N, seed=seed)
    problem = assemble(stacked, spec, scenarios, mode, weights, [0.0], RiskBudget(delta_bar), reg)
    return problem, stacked, spec


def _limit_until(last_step, limit=5.0):
    """Upper bound limit + theta at steps 1..last_step, no bound afterwards."""
    def _bound(theta, k):
        bound = limit + np.asarray(theta, dtype=float)[..., :1]
        return bound if k <= last_step else np.full_like(bound, np.inf)
    return _bound


def _infeasible_problem():
    """1 <= z and 1 <= -z."""
    return RiskProblem.from_arrays([[2.0]], [0.0], det_G=[[1.0], [-1.0]], det_X=[1.0, 1.0])


# ═══════════════════════════════════════════════════════════════════════════════
# Configuration and regularizers
# ═══════════════════════════════════════════════════════════════════════════════

class TestSolverConfig:

    @pytest.mark.parametrize('kwargs', [
        {'mu_shrink': 1.0},
        {'tol_kkt': 0.0},
        {'mu0': -1.0},
        {'max_newton': 0},
        {'alpha': 0.6},
        {'beta': 1.0},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            SolverConfig(**kwargs)

    def test_mu_reached_absorbs_rounding(self):
        config = SolverConfig(tol_kkt=1e-6)
        mu = config.mu0 * config.mu_shrink ** 6
        assert config.mu_reached(mu)
        assert config.mu_reached(1e-6 * (1.0 + 1e-12))
        assert not config.mu_reached(1e-5)


class TestRegularizers:

    def test_inverse(self):
        reg = make_regularizer('inverse')
        delta = np.array([0.1, 0.5])
        assert reg.value(delta) == pytest.approx(12.0)
        assert np.allclose(reg.gradient(delta), [-100.0, -4.0])
        assert np.all(reg.curvature(delta) > 0)

    def test_negative_log(self):
        reg = make_regularizer('neglog')
        assert reg.value(np.array([1.0])) == pytest.approx(0.0)
        assert reg.decreasing

    def test_squared_is_increasing(self):
        reg = make_regularizer('squared')
        assert not reg.decreasing
        assert np.allclose(reg.gradient(np.array([0.25])), [0.5])

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            make_regularizer('entropy')


# ═══════════════════════════════════════════════════════════════════════════════
# Assembly
# ═══════════════════════════════════════════════════════════════════════════════

class TestAssemble:

    def test_row_split(self):
        problem, _, _ = _tracking_problem()
        assert problem.n_c == N
        assert problem.det_G.shape[0] == 2 * N
        assert problem.nonneg.size == 0
        assert problem.n_z == 2 * N
        assert all(key[0] == 'state_hi' for key in problem.layout.chance_keys)

    def test_single_scenario_is_deterministic(self):
        problem, _, _ = _tracking_problem(S=1)
        assert problem.n_c == 0

    def test_convexity_certificate_withheld(self):
        problem, _, _ = _tracking_problem(delta_bar=0.8)
        assert not problem.convexity_certified
        assert any('convexity' in w for w in problem.warnings)

    def test_squared_regularizer_flagged(self):
        problem, _, _ = _tracking_problem(regularizer='squared')
        assert not problem.budget_tightness_guaranteed
        assert problem.warnings

    def test_soft_rows_get_nonnegative_slacks(self):
        stacked = stack_dynamics(make_scalar_model(), N)
        spec = make_speed_limit_spec().with_bounds(xi_soft_hi=constant([3.0]))
        problem = assemble(stacked, spec, make_scenarios(S=50, N=N), 'mv', make_weights(), [0.0], RiskBudget(0.1))
        assert problem.nonneg.size == N
        assert np.all(problem.nonneg >= N)

    def test_partially_pruned_family(self):
        stacked = stack_dynamics(make_scalar_model(), N)
        spec = make_speed_limit_spec().with_bounds(xi_hi=_limit_until(2), xi_req=constant([8.0]))
        problem = assemble(stacked, spec, make_scenarios(S=200, N=N), 'mv', make_weights(), [0.0],
                           RiskBudget(0.1))
        upper = problem.index.rows('state_hi')
        assert list(problem.index.pruned[upper]) == [False, False, True, True]
        assert list(problem.layout.chance_keys) == [('state_hi', 0, 0), ('state_hi', 1, 0)]
        assert np.array_equal(problem.chance_rows, upper[:2])
        assert not np.isin(upper[2:], problem.det_rows).any()

        solution = solve(problem)
        assert solution.optimal
        assert solution.delta.size == 2
        assert abs(solution.budget_slack) <= 1e-6
        y = problem.chance_G @ np.concatenate([solution.v_hat, solution.gamma_hat]) + problem.chance_h
        assert np.all(problem.tightening(solution.delta) <= y + 1e-9)
        pred = stacked.predict([0.0], solution.v_hat)
        assert pred[:2].max() < 5.0
        assert pred[-1] > 5.0

    def test_budget_rows_checked(self):
        stacked = stack_dynamics(make_scalar_model(), N)
        with pytest.raises(ConfigurationError):
            assemble(stacked, make_speed_limit_spec(), make_scenarios(S=50, N=N), 'mv', make_weights(),
                     [0.0], RiskBudget(1e-3, epsilon_floor=5e-4))


# ═══════════════════════════════════════════════════════════════════════════════
# Joint solve
# ═══════════════════════════════════════════════════════════════════════════════

class TestSolve:

    def test_one_row_analytic_optimum(self):
        solution = solve(make_one_row_problem())
        assert solution.status == 'optimal'
        assert solution.iterations + solution.phase1_iterations < SolverConfig().max_newton
        assert solution.delta[0] == pytest.approx(0.5, abs=1e-6)
        assert solution.v_hat[0] == pytest.approx(1.0, abs=1e-6)
        assert solution.lam > 0.0

    @pytest.mark.parametrize('regularizer', ['inverse', 'neglog'])
    def test_budget_used_in_full(self, regularizer):
        problem, _, _ = _tracking_problem(regularizer=regularizer)
        solution = solve(problem)
        assert solution.optimal
        assert abs(solution.budget_slack) <= 1e-6
        assert solution.lam > 0.0
        assert np.all(solution.delta >= problem.budget.epsilon_floor)

    @pytest.mark.parametrize('mode', ['mv', 'bd', 'cdf'])
    def test_all_modes_converge(self, mode):
        problem, _, _ = _tracking_problem(mode=mode, delta_bar=0.05)
        solution = solve(problem)
        assert solution.status == 'optimal'
        assert solution.iterations + solution.phase1_iterations < SolverConfig().max_newton
        report = kkt_report(problem, solution, probe=False)
        bound = max(SolverConfig().tol_kkt, report['stationarity_floor'])
        assert report['stationarity'] <= bound * (1.0 + 1e-6)
        assert solution.kkt_residual <= bound * (1.0 + 1e-6)

    def test_converged_solve_stops_before_cap(self):
        config = SolverConfig()
        for seed in (11, 12, 13):
            solution = solve(random_risk_problem(seed), config)
            assert solution.status == 'optimal'
            assert solution.iterations + solution.phase1_iterations < config.max_newton

    def test_duality_gap_reported(self):
        problem, _, _ = _tracking_problem()
        solution = solve(problem)
        assert not solution.polished
        assert solution.duality_gap > 0.0
        assert solution.summary()['duality_gap'] == solution.duality_gap

    def test_plan_satisfies_tightened_rows(self):
        problem, stacked, _ = _tracking_problem()
        solution = solve(problem)
        y = problem.chance_G @ np.concatenate([solution.v_hat, solution.gamma_hat]) + problem.chance_h
        assert np.all(problem.tightening(solution.delta) <= y + 1e-9)

    def test_empirical_coverage(self):
        problem, stacked, spec = _tracking_problem(delta_bar=0.1)
        solution = solve(problem)
        y = build_lhs(stacked, [0.0], solution.v_hat, solution.gamma_hat)
        index = ConstraintIndexMap.build(1, 1, N)
        builder = OffsetBuilder(spec, stacked.model, index)
        fresh = make_scenarios(S=4000, N=N, seed=99)
        rates = empirical_violation(y, fresh, {'chance': problem.chance_rows}, builder)
        assert rates['chance'] <= 0.1 + mc_margin(0.1, 4000)

    def test_no_worse_than_uniform(self):
        problem, _, _ = _tracking_problem()
        joint = solve(problem)
        fixed = solve_fixed_risk(problem, uniform_allocation(problem.budget, problem.n_c))
        assert joint.objective <= fixed.objective + 1e-6 * max(1.0, abs(fixed.objective))

    def test_random_instances(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            solution = solve(random_risk_problem(rng))
            assert solution.status in STATUSES
            assert solution.optimal

    def test_multipliers_nonnegative(self):
        solution = solve(random_risk_problem(7))
        for name, values in solution.multipliers.items():
            assert np.all(values >= 0.0), name

    def test_trace_recorded(self):
        solution = solve(make_one_row_problem(), SolverConfig(record_trace=True))
        assert solution.trace
        assert set(solution.trace[0]) == {'phase', 'mu', 'barrier', 'stationarity', 'step'}

    def test_iteration_cap(self):
        solution = solve(random_risk_problem(1), SolverConfig(max_newton=2))
        assert solution.status == 'max_iter'

    def test_summary_keys(self):
        summary = solve(make_one_row_problem()).summary()
        assert {'status', 'iterations', 'kkt_residual', 'lambda', 'risk_total'} <= set(summary)


# ═══════════════════════════════════════════════════════════════════════════════
# Baselines
# ═══════════════════════════════════════════════════════════════════════════════

class TestBaselines:

    def test_deterministic_uses_mean(self):
        solution = solve_deterministic(make_one_row_problem())
        assert solution.optimal
        assert abs(solution.v_hat[0]) <= 1e-8
        assert solution.delta.size == 0
        assert solution.lam == 0.0

    def test_deterministic_is_exact_qp_optimum(self):
        solution = solve_deterministic(make_one_row_problem())
        assert solution.polished
        assert solution.duality_gap == 0.0
        assert solution.barrier == 0.0
        assert solution.kkt_residual <= SolverConfig().tol_kkt
        assert np.all(solution.multipliers['det'] >= 0.0)

    def test_deterministic_matches_active_set(self):
        problem, _, _ = _tracking_problem()
        G = np.vstack([problem.chance_G, problem.det_G])
        h = np.concatenate([problem.chance_h, problem.det_h])
        X = np.concatenate([problem.chance_moments.mean, problem.det_X])
        reference = ActiveSetSolver().solve(problem.H, problem.g, -G, h - X)
        assert reference['status'] == 'optimal'
        solution = solve_deterministic(problem)
        z = np.concatenate([solution.v_hat, solution.gamma_hat])
        assert np.allclose(z, reference['x'], atol=1e-8)

    def test_fixed_risk_tightening(self):
        solution = solve_fixed_risk(make_one_row_problem(w_delta=1e-3), [0.2])
        assert solution.v_hat[0] == pytest.approx(2.0, abs=1e-8)
        assert solution.polished
        assert solution.objective == pytest.approx(4.0 + 1e-3 * 5.0, abs=1e-5)

    @pytest.mark.parametrize('delta', [[0.6], [0.0], [0.1, 0.1]])
    def test_fixed_risk_rejects_bad_allocation(self, delta):
        with pytest.raises(ConfigurationError):
            solve_fixed_risk(make_one_row_problem(), delta)

    def test_degenerate_scenarios_match_deterministic(self):
        problem, _, _ = _tracking_problem(S=1)
        assert np.allclose(solve(problem).v_hat, solve_deterministic(problem).v_hat, atol=1e-6)


# ═══════════════════════════════════════════════════════════════════════════════
# Infeasibility
# ═══════════════════════════════════════════════════════════════════════════════

class TestInfeasible:

    def test_certificate(self):
        solution = solve_deterministic(_infeasible_problem())
        assert solution.status == 'infeasible'
        assert solution.certificate['max_excess'] > 0.5
        assert solution.certificate['total_excess'] > 0.0

    def test_residual_is_infinite(self):
        solution = solve_deterministic(_infeasible_problem())
        assert solution.kkt_residual == float('inf')


# ═══════════════════════════════════════════════════════════════════════════════
# Warm start
# ═══════════════════════════════════════════════════════════════════════════════

class TestWarmStart:

    def test_shift_repeats_last_block(self):
        problem, _, _ = _tracking_problem()
        solution = solve(problem)
        warm = warm_shift(solution)
        assert np.allclose(warm.v_hat[:-1], solution.v_hat[1:])
        assert warm.v_hat[-1] == solution.v_hat[-1]
        assert warm.delta.sum() == pytest.approx(problem.budget.delta_bar)

    def test_warm_solve_reaches_same_plan(self):
        problem, _, _ = _tracking_problem()
        cold = solve(problem)
        warm = solve(problem, warm=cold)
        assert warm.optimal
        assert np.allclose(warm.v_hat, cold.v_hat, atol=1e-5)

    def test_warm_start_cuts_newton_steps(self):
        problem, _, _ = _tracking_problem()
        cold = solve(problem)
        warm = solve(problem, warm=cold)
        assert warm.optimal
        assert warm.phase1_iterations == 0
        assert warm.iterations <= 0.8 * (cold.iterations + cold.phase1_iterations)
        assert np.allclose(warm.delta, cold.delta, atol=1e-6)

    def test_shift_needs_layout(self):
        with pytest.raises(ConfigurationError):
            warm_shift(solve(make_one_row_problem()))


# ═══════════════════════════════════════════════════════════════════════════════
# KKT report
# ═══════════════════════════════════════════════════════════════════════════════

class TestKktReport:

    def test_optimal_point(self):
        problem = make_one_row_problem(w_delta=1e-3)
        solution = solve(problem)
        report = kkt_report(problem, solution)
        assert report['dual_feasible']
        assert report['budget_tight']
        assert report['lambda_positive']
        assert report['stationarity'] <= max(SolverConfig().tol_kkt, report['stationarity_floor'])
        assert report['lipschitz_ratio'] is not None
        assert not report['status_changed']

    def test_probe_can_be_skipped(self):
        problem = make_one_row_problem()
        report = kkt_report(problem, solve(problem), probe=False)
        assert report['lipschitz_ratio'] is None

    def test_polished_solution_uses_its_multipliers(self):
        problem = RiskProblem.from_arrays([[2.0]], [0.0], det_G=[[1.0]], det_X=[1.0])
        solution = solve(problem)
        assert solution.polished
        assert solution.v_hat[0] == pytest.approx(1.0, abs=1e-10)
        report = kkt_report(problem, solution, probe=False)
        assert report['stationarity'] <= 1e-12
        assert report['stationarity_floor'] == 0.0
        assert report['complementarity'] <= 1e-12

    def test_deterministic_problem_has_no_budget(self):
        problem = RiskProblem.from_arrays([[2.0]], [-2.0], chance_moments=RowMoments())
        report = kkt_report(problem, solve(problem), probe=False)
        assert report['budget_tight'] is None
