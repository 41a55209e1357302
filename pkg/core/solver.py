"""
Risk-Allocation Solver
Joint optimisation of inputs, soft slacks and per-row risk levels by a
log-barrier interior-point method, with the deterministic and fixed-risk
baselines and KKT diagnostics
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from core.active_set import ActiveSetSolver
from core.exceptions import ConfigurationError
from core.stacked import (
    ConstraintIndexMap,
    OffsetBuilder,
    SpecBundle,
    StackedSystem,
    Weights,
    build_objective,
    lhs_map,
)
from core.uncertainty import (
    DistributionMode,
    MomentSummary,
    RiskBudget,
    RowMoments,
    ScenarioSet,
    delta_conv,
    estimate_moments,
    make_mode,
    psi,
)
from utils import config as env

logger = logging.getLogger(__name__)

STATUSES = ('optimal', 'infeasible', 'max_iter')

# Relative rounding of one constraint evaluation
ROUNDING = 4.0 * np.finfo(float).eps
# Largest rounding floor accepted in place of tol_kkt, as a multiple of tol_kkt
FLOOR_CAP = 1e3
# Scaled stationarity below which a warm point counts as centred for its fitted mu
WARM_CENTERED = 1e-3


# ============================================================================
# Configuration and regularizers
# ============================================================================

@dataclass(frozen=True)
class SolverConfig:
    tol_kkt: float = env.TOL_KKT
    mu0: float = 1.0
    mu_shrink: float = 0.1
    max_newton: int = env.MAX_NEWTON
    epsilon_floor: Optional[float] = None
    alpha: float = 0.3
    beta: float = 0.8
    warm_mu_factor: float = 1e-2
    phase1_prox: float = 1e-6
    licq_condition: float = 1e12
    lipschitz_step: float = 1e-4
    record_trace: bool = False

    def __post_init__(self):
        if not 0.0 < self.mu_shrink < 1.0:
            raise ConfigurationError(f"mu_shrink must lie in (0, 1), got {self.mu_shrink}")
        if self.tol_kkt <= 0:
            raise ConfigurationError(f"tol_kkt must be positive, got {self.tol_kkt}")
        if self.mu0 <= 0:
            raise ConfigurationError(f"mu0 must be positive, got {self.mu0}")
        if self.max_newton < 1:
            raise ConfigurationError(f"max_newton must be >= 1, got {self.max_newton}")
        if not (0.0 < self.alpha < 0.5 and 0.0 < self.beta < 1.0):
            raise ConfigurationError(f"line search needs alpha in (0, 0.5), beta in (0, 1)")

    def mu_reached(self, mu: float) -> bool:
        """True once mu is down to tol_kkt; mu0 * mu_shrink**k carries rounding."""
        return mu <= self.tol_kkt * (1.0 + 1e-9)


class Regularizer:
    """Separable r(delta) = sum_j r_j(delta_j)."""

    name = 'base'
    decreasing = True

    def value(self, delta: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, delta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def curvature(self, delta: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class InverseRegularizer(Regularizer):
    name = 'inverse'

    def value(self, delta):
        return float(np.sum(1.0 / delta))

    def gradient(self, delta):
        return -1.0 / delta ** 2

    def curvature(self, delta):
        return 2.0 / delta ** 3


class NegativeLogRegularizer(Regularizer):
    name = 'neglog'

    def value(self, delta):
        return float(-np.sum(np.log(delta)))

    def gradient(self, delta):
        return -1.0 / delta

    def curvature(self, delta):
        return 1.0 / delta ** 2


class SquaredRegularizer(Regularizer):
    """Increasing in delta: optimal allocations may leave budget unused."""

    name = 'squared'
    decreasing = False

    def value(self, delta):
        return float(np.sum(delta ** 2))

    def gradient(self, delta):
        return 2.0 * delta

    def curvature(self, delta):
        return np.full_like(delta, 2.0)


REGULARIZERS = {
    'inverse': InverseRegularizer,
    'neglog': NegativeLogRegularizer,
    'squared': SquaredRegularizer,
}


def make_regularizer(name: str) -> Regularizer:
    try:
        return REGULARIZERS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown regularizer '{name}', expected one of {sorted(REGULARIZERS)}")


# ============================================================================
# Problem, solution and warm-start types
# ============================================================================

@dataclass(frozen=True)
class ProblemLayout:
    N: int
    n_xi: int
    n_v: int
    chance_keys: Tuple[Tuple[str, int, int], ...] = ()


@dataclass(frozen=True, eq=False)
class RiskProblem:
    """
    Strictly convex program over z = (v_hat, gamma_hat) and delta.

        min  0.5 z'Hz + g'z + w_delta r(delta)
        s.t. psi_j(delta_j) <= G_j z + E_j xi0        chance rows
             X_j            <= G_j z + E_j xi0        deterministic rows
             z_i >= 0 (gamma entries of active soft rows)
             epsilon <= delta_j,  sum(delta) <= delta_bar
    """

    H: np.ndarray
    g0: np.ndarray
    G_xi0: np.ndarray
    xi0: np.ndarray
    chance_G: np.ndarray
    chance_E: np.ndarray
    chance_moments: RowMoments
    det_G: np.ndarray
    det_E: np.ndarray
    det_X: np.ndarray
    nonneg: np.ndarray
    budget: RiskBudget
    w_delta: float
    mode: DistributionMode
    regularizer: Regularizer
    n_v_total: int
    chance_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    det_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    layout: Optional[ProblemLayout] = None
    index: Optional[ConstraintIndexMap] = None
    moments: Optional[MomentSummary] = None
    convexity_certified: bool = True
    warnings: Tuple[str, ...] = ()

    @property
    def n_z(self) -> int:
        return self.H.shape[0]

    @property
    def n_c(self) -> int:
        return self.chance_G.shape[0]

    @property
    def g(self) -> np.ndarray:
        return self.g0 + self.G_xi0 @ self.xi0

    @property
    def chance_h(self) -> np.ndarray:
        return self.chance_E @ self.xi0

    @property
    def det_h(self) -> np.ndarray:
        return self.det_E @ self.xi0

    @property
    def budget_tightness_guaranteed(self) -> bool:
        return self.regularizer.decreasing and self.w_delta > 0

    def with_initial_state(self, xi0) -> 'RiskProblem':
        return replace(self, xi0=np.asarray(xi0, dtype=float))

    def tightening(self, delta) -> np.ndarray:
        return np.asarray(psi(self.mode, self.chance_moments, delta), dtype=float)

    def objective_quadratic(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.g @ z)

    @classmethod
    def from_arrays(cls, H, g, chance_G=None, chance_h=None, chance_moments: Optional[RowMoments] = None,
                    det_G=None, det_h=None, det_X=None, nonneg: Sequence[int] = (),
                    budget: Optional[RiskBudget] = None, w_delta: float = 0.0,
                    mode: Union[str, DistributionMode] = 'mv', regularizer: Optional[Regularizer] = None,
                    n_v_total: Optional[int] = None) -> 'RiskProblem':
        """Problem with y = G z + h given directly (no initial-state dependence)."""
        H = np.atleast_2d(np.asarray(H, dtype=float))
        n_z = H.shape[0]
        chance_G = np.zeros((0, n_z)) if chance_G is None else np.atleast_2d(np.asarray(chance_G, dtype=float))
        det_G = np.zeros((0, n_z)) if det_G is None else np.atleast_2d(np.asarray(det_G, dtype=float))
        chance_h = np.zeros(chance_G.shape[0]) if chance_h is None else np.asarray(chance_h, dtype=float)
        det_h = np.zeros(det_G.shape[0]) if det_h is None else np.asarray(det_h, dtype=float)
        det_X = np.zeros(det_G.shape[0]) if det_X is None else np.asarray(det_X, dtype=float)
        mode = make_mode(mode) if isinstance(mode, str) else mode
        regularizer = regularizer or InverseRegularizer()
        budget = budget or RiskBudget(0.5)
        if chance_moments is None:
            chance_moments = RowMoments(mean=np.zeros(chance_G.shape[0]), var=np.zeros(chance_G.shape[0]))
        n_c = chance_G.shape[0]
        budget.check_rows(n_c)
        certified = n_c == 0 or budget.delta_bar <= float(np.min(np.atleast_1d(delta_conv(mode, chance_moments))))
        return cls(
            H=H, g0=np.asarray(g, dtype=float), G_xi0=np.zeros((n_z, 1)), xi0=np.ones(1),
            chance_G=chance_G, chance_E=chance_h[:, None], chance_moments=chance_moments,
            det_G=det_G, det_E=det_h[:, None], det_X=det_X,
            nonneg=np.asarray(nonneg, dtype=int), budget=budget, w_delta=float(w_delta),
            mode=mode, regularizer=regularizer,
            n_v_total=n_z if n_v_total is None else n_v_total,
            convexity_certified=certified,
        )


@dataclass(frozen=True, eq=False)
class WarmStart:
    v_hat: np.ndarray
    gamma_hat: np.ndarray
    delta: np.ndarray
    chance_keys: Tuple[Tuple[str, int, int], ...] = ()


@dataclass(frozen=True, eq=False)
class Solution:
    v_hat: np.ndarray
    gamma_hat: np.ndarray
    delta: np.ndarray
    multipliers: Dict[str, np.ndarray]
    lam: float
    objective: float
    objective_quadratic: float
    kkt_residual: float
    status: str
    iterations: int = 0
    phase1_iterations: int = 0
    hessian_pd: bool = True
    barrier: float = 0.0
    delta_bar: float = 0.0
    layout: Optional[ProblemLayout] = None
    certificate: Optional[Dict] = None
    trace: Tuple[Dict, ...] = ()
    duality_gap: float = 0.0
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == 'optimal'

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.v_hat, self.gamma_hat, self.delta])

    @property
    def budget_slack(self) -> float:
        return float(self.delta_bar - np.sum(self.delta)) if self.delta.size else float('nan')

    def summary(self) -> Dict:
        return {
            'status': self.status,
            'iterations': self.iterations,
            'phase1_iterations': self.phase1_iterations,
            'kkt_residual': self.kkt_residual,
            'objective': self.objective,
            'objective_quadratic': self.objective_quadratic,
            'lambda': self.lam,
            'risk_total': float(np.sum(self.delta)),
            'hessian_pd': self.hessian_pd,
            'duality_gap': self.duality_gap,
        }


# ============================================================================
# Assembly
# ============================================================================

def assemble(stacked: StackedSystem, spec: SpecBundle, scenarios: ScenarioSet,
             mode: Union[str, DistributionMode], weights: Weights, xi0,
             budget: RiskBudget, regularizer: Optional[Regularizer] = None) -> RiskProblem:
    """
    Build the risk-allocation program for one planning instant.

    Chance rows are the unpruned, theta-dependent rows with positive
    dispersion; every other unpruned row is a hard row at its mean.
    """
    mode = make_mode(mode) if isinstance(mode, str) else mode
    regularizer = regularizer or InverseRegularizer()
    xi0 = np.asarray(xi0, dtype=float)
    N, n_xi, n_v = stacked.N, stacked.n_xi, stacked.n_v

    index = ConstraintIndexMap.build(n_xi, n_v, N)
    builder = OffsetBuilder(spec, stacked.model, index)
    moments = estimate_moments(scenarios, builder)
    index = index.with_pruning(moments.pruned)
    objective = build_objective(stacked, spec, scenarios, weights, xi0)
    G, E = lhs_map(stacked)

    active = np.flatnonzero(index.active)
    candidates = active[moments.theta_dependent[active]]
    dispersed = np.asarray(mode.dispersed(mode.row_moments(moments, candidates)), dtype=bool)
    chance = candidates[dispersed]
    det = np.setdiff1d(active, chance)
    chance_moments = mode.row_moments(moments, chance)
    budget.check_rows(chance.size)

    warnings: List[str] = []
    certified = True
    if chance.size:
        threshold = float(np.min(np.atleast_1d(delta_conv(mode, chance_moments))))
        if budget.delta_bar > threshold:
            certified = False
            warnings.append(f"delta_bar={budget.delta_bar} exceeds delta_conv={threshold:.4g}; "
                            f"convexity certificate withheld")
    if not regularizer.decreasing or weights.delta <= 0:
        warnings.append(f"regularizer '{regularizer.name}' with w_delta={weights.delta} "
                        f"does not force the budget to be used in full")
    for message in warnings:
        logger.warning(message)

    soft = index.block_slice('soft')
    soft_active = np.flatnonzero(index.active[soft])
    nonneg = N * n_v + soft_active

    layout = ProblemLayout(N=N, n_xi=n_xi, n_v=n_v,
                           chance_keys=tuple(index.locate(int(j)) for j in chance))

    return RiskProblem(
        H=objective.H, g0=objective.g0, G_xi0=objective.G_xi0, xi0=xi0,
        chance_G=G[chance], chance_E=E[chance], chance_moments=chance_moments,
        det_G=G[det], det_E=E[det], det_X=moments.mean[det],
        nonneg=nonneg, budget=budget, w_delta=float(weights.delta),
        mode=mode, regularizer=regularizer, n_v_total=N * n_v,
        chance_rows=chance, det_rows=det, layout=layout, index=index, moments=moments,
        convexity_certified=certified, warnings=tuple(warnings),
    )


# ============================================================================
# Barrier programs
# ============================================================================

class _RiskProgram:
    """
    Smooth convex program min f(x) s.t. c(x) < 0 with x = (z, delta).

    Constraint groups, in order: chance, det, nonneg, floor, budget. When
    ``with_delta`` is False the chance rows are hard rows at ``chance_X``.
    """

    GROUPS = ('chance', 'det', 'nonneg', 'floor', 'budget')

    def __init__(self, problem: RiskProblem, with_delta: bool, chance_X: Optional[np.ndarray] = None,
                 epsilon: Optional[float] = None):
        self.problem = problem
        self.with_delta = with_delta and problem.n_c > 0
        self.n_z = problem.n_z
        self.n_c = problem.n_c if self.with_delta else 0
        self.n = self.n_z + self.n_c
        self.epsilon = problem.budget.epsilon_floor if epsilon is None else epsilon
        self.H = problem.H
        self.g = problem.g

        n_z, n_c = self.n_z, self.n_c
        det_G, det_offset = problem.det_G, problem.det_X - problem.det_h
        if not self.with_delta and problem.n_c:
            X = problem.chance_moments.mean if chance_X is None else chance_X
            det_G = np.vstack([problem.chance_G, det_G])
            det_offset = np.concatenate([np.asarray(X, dtype=float) - problem.chance_h, det_offset])

        blocks, offsets, sizes = [], [], {}

        def _add(name, K, k0):
            blocks.append(K)
            offsets.append(k0)
            sizes[name] = K.shape[0]

        pad = lambda M: np.hstack([M, np.zeros((M.shape[0], n_c))])
        _add('chance', pad(-problem.chance_G) if n_c else np.zeros((0, self.n)),
             -problem.chance_h if n_c else np.zeros(0))
        _add('det', pad(-det_G), det_offset)
        nonneg = np.zeros((problem.nonneg.size, self.n))
        nonneg[np.arange(problem.nonneg.size), problem.nonneg] = -1.0
        _add('nonneg', nonneg, np.zeros(problem.nonneg.size))
        if n_c:
            floor = np.zeros((n_c, self.n))
            floor[np.arange(n_c), n_z + np.arange(n_c)] = -1.0
            _add('floor', floor, np.full(n_c, self.epsilon))
            budget = np.zeros((1, self.n))
            budget[0, n_z:] = 1.0
            _add('budget', budget, np.array([-problem.budget.delta_bar]))
        else:
            _add('floor', np.zeros((0, self.n)), np.zeros(0))
            _add('budget', np.zeros((0, self.n)), np.zeros(0))

        self.K = np.vstack(blocks)
        self.k0 = np.concatenate(offsets)
        self.abs_K = np.abs(self.K)
        self.m = self.K.shape[0]
        self.slices: Dict[str, slice] = {}
        start = 0
        for name in self.GROUPS:
            self.slices[name] = slice(start, start + sizes[name])
            start += sizes[name]
        self.relaxable = np.ones(self.m, dtype=bool)
        self.relaxable[self.slices['floor']] = False
        self.relaxable[self.slices['budget']] = False

    # ---------------------------------------------------------------- pieces

    def split(self, x):
        return x[:self.n_z], x[self.n_z:]

    def in_domain(self, x) -> bool:
        if not self.n_c:
            return True
        delta = x[self.n_z:]
        return bool(np.all(delta > 0.0) and np.all(delta < 1.0))

    def objective(self, x):
        z, delta = self.split(x)
        Hz = self.H @ z
        f = 0.5 * z @ Hz + self.g @ z
        grad = np.concatenate([Hz + self.g, np.zeros(self.n_c)])
        hess = np.zeros((self.n, self.n))
        hess[:self.n_z, :self.n_z] = self.H
        if self.n_c and self.problem.w_delta:
            w = self.problem.w_delta
            reg = self.problem.regularizer
            f += w * reg.value(delta)
            grad[self.n_z:] = w * reg.gradient(delta)
            hess[self.n_z:, self.n_z:] = np.diag(w * reg.curvature(delta))
        return float(f), grad, hess

    def values(self, x) -> np.ndarray:
        c = self.K @ x + self.k0
        if self.n_c:
            c[self.slices['chance']] += self.problem.tightening(x[self.n_z:])
        return c

    def magnitude(self, x) -> np.ndarray:
        """Size of the terms summed into each constraint value."""
        out = self.abs_K @ np.abs(x) + np.abs(self.k0)
        if self.n_c:
            out[self.slices['chance']] += np.abs(self.problem.tightening(x[self.n_z:]))
        return out

    def jacobian(self, x) -> np.ndarray:
        if not self.n_c:
            return self.K
        J = self.K.copy()
        d1, _ = self.problem.mode.derivatives(self.problem.chance_moments, x[self.n_z:])
        J[np.arange(self.n_c), self.n_z + np.arange(self.n_c)] = d1
        return J

    def curvature(self, x, weights: np.ndarray) -> Optional[np.ndarray]:
        if not self.n_c:
            return None
        _, d2 = self.problem.mode.derivatives(self.problem.chance_moments, x[self.n_z:])
        out = np.zeros((self.n, self.n))
        idx = self.n_z + np.arange(self.n_c)
        out[idx, idx] = weights[self.slices['chance']] * d2
        return out

    def strictly_feasible(self, x) -> bool:
        return self.in_domain(x) and bool(np.all(self.values(x) < 0.0))

    # ----------------------------------------------------------- start point

    def initial_point(self, warm: Optional[Union[WarmStart, Solution]]) -> np.ndarray:
        problem = self.problem
        x = np.zeros(self.n)
        if warm is not None:
            v = np.asarray(warm.v_hat, dtype=float)
            gamma = np.asarray(warm.gamma_hat, dtype=float)
            if v.size + gamma.size == self.n_z:
                x[:self.n_z] = np.concatenate([v, gamma])
        if self.n_c:
            bar, eps = problem.budget.delta_bar, self.epsilon
            delta = np.full(self.n_c, 0.5 * (eps + bar / self.n_c))
            if warm is not None and np.size(warm.delta):
                delta = _map_warm_delta(warm, problem, delta)
            x[self.n_z:] = delta
        return x


def _map_warm_delta(warm, problem: RiskProblem, fallback: np.ndarray) -> np.ndarray:
    bar, eps = problem.budget.delta_bar, problem.budget.epsilon_floor
    keys = problem.layout.chance_keys if problem.layout else ()
    warm_keys = getattr(warm, 'chance_keys', None) or (warm.layout.chance_keys if getattr(warm, 'layout', None) else ())
    if keys and warm_keys:
        lookup = dict(zip(warm_keys, np.asarray(warm.delta, dtype=float)))
        delta = np.array([lookup.get(key, np.nan) for key in keys])
        delta = np.where(np.isnan(delta), fallback, delta)
    elif np.size(warm.delta) == fallback.size:
        delta = np.asarray(warm.delta, dtype=float).copy()
    else:
        return fallback
    delta = np.maximum(delta, 2.0 * eps)
    total = delta.sum()
    # only a guess that exhausts the budget is pulled inside
    if total >= bar * (1.0 - 1e-12):
        delta *= 0.999 * bar / total
    if np.any(delta <= eps):
        return fallback
    return delta


class _PhaseOneProgram:
    """min s + prox/2 |x - anchor|^2  s.t.  c_i(x) <= s (relaxable), c_i(x) < 0 (hard), s >= -1."""

    def __init__(self, inner: _RiskProgram, anchor: np.ndarray, prox: float):
        self.inner = inner
        self.anchor = anchor
        self.prox = prox
        self.n = inner.n + 1
        self.m = inner.m + 1
        self.relax = inner.relaxable.astype(float)

    def in_domain(self, x):
        return self.inner.in_domain(x[:-1])

    def objective(self, x):
        d = x[:-1] - self.anchor
        f = x[-1] + 0.5 * self.prox * d @ d
        grad = np.concatenate([self.prox * d, [1.0]])
        hess = np.diag(np.concatenate([np.full(self.inner.n, self.prox), [0.0]]))
        return float(f), grad, hess

    def values(self, x):
        c = self.inner.values(x[:-1]) - self.relax * x[-1]
        return np.concatenate([c, [-1.0 - x[-1]]])

    def magnitude(self, x):
        inner = self.inner.magnitude(x[:-1]) + self.relax * abs(x[-1])
        return np.concatenate([inner, [1.0 + abs(x[-1])]])

    def jacobian(self, x):
        J = np.hstack([self.inner.jacobian(x[:-1]), -self.relax[:, None]])
        cap = np.zeros((1, self.n))
        cap[0, -1] = -1.0
        return np.vstack([J, cap])

    def curvature(self, x, weights):
        inner = self.inner.curvature(x[:-1], weights[:-1])
        if inner is None:
            return None
        out = np.zeros((self.n, self.n))
        out[:-1, :-1] = inner
        return out


# ============================================================================
# Barrier engine
# ============================================================================

class _Tracker:
    def __init__(self, config: SolverConfig):
        self.config = config
        self.newton = 0
        self.phase1 = 0
        self.hessian_pd = True
        self.trace: List[Dict] = []

    @property
    def exhausted(self) -> bool:
        return self.newton + self.phase1 >= self.config.max_newton


def _barrier_value(program, x, mu) -> float:
    if not program.in_domain(x):
        return math.inf
    c = program.values(x)
    if np.any(c >= 0.0):
        return math.inf
    f, _, _ = program.objective(x)
    return f - mu * float(np.sum(np.log(-c)))


def _scaled_residual(grad_f, J, lam) -> Tuple[float, float]:
    """max |grad_f + J'lam| over the problem's own scale, and that scale."""
    scale = 1.0 + max(float(np.max(np.abs(grad_f), initial=0.0)),
                      float(np.max(np.abs(J).T @ np.abs(lam), initial=0.0)))
    residual = grad_f + J.T @ lam
    return float(np.max(np.abs(residual), initial=0.0)) / scale, scale


def _rounding_floor(program, x, J, lam, c, scale) -> float:
    """Scaled stationarity that rounding in the constraint values alone leaves behind."""
    if not c.size:
        return 0.0
    rel = ROUNDING * program.magnitude(x) / np.maximum(np.abs(c), np.finfo(float).tiny)
    return float(np.max(np.abs(J).T @ (lam * rel), initial=0.0)) / scale


def _stationarity(program, x, mu):
    """Returns (stationarity, rounding floor, lam) of the barrier subproblem at x."""
    _, grad_f, _ = program.objective(x)
    c = program.values(x)
    J = program.jacobian(x)
    lam = mu / (-c)
    stationarity, scale = _scaled_residual(grad_f, J, lam)
    return stationarity, _rounding_floor(program, x, J, lam, c, scale), lam


def _newton_direction(hess, grad) -> Tuple[np.ndarray, bool]:
    diag = np.sqrt(np.maximum(np.abs(np.diag(hess)), 1e-300))
    scaled = hess / np.outer(diag, diag)
    rhs = -grad / diag
    try:
        factor = linalg.cho_factor(scaled, check_finite=False)
        return linalg.cho_solve(factor, rhs, check_finite=False) / diag, True
    except linalg.LinAlgError:
        pass
    shift = 1e-12
    eye = np.eye(hess.shape[0])
    for _ in range(10):
        try:
            factor = linalg.cho_factor(scaled + shift * eye, check_finite=False)
            return linalg.cho_solve(factor, rhs, check_finite=False) / diag, False
        except linalg.LinAlgError:
            shift *= 100.0
    step, *_ = np.linalg.lstsq(scaled, rhs, rcond=None)
    return step / diag, False


def _line_search(program, x, step, mu, phi, slope, config) -> Optional[float]:
    t = 1.0
    t_min = 1e-14
    while t > t_min:
        trial = x + t * step
        if program.in_domain(trial) and np.all(program.values(trial) < 0.0):
            break
        t *= config.beta
    else:
        return None
    noise = 10.0 * np.finfo(float).eps * (1.0 + abs(phi))
    while t > t_min:
        value = _barrier_value(program, x + t * step, mu)
        if value <= phi + config.alpha * t * slope + noise:
            return t
        t *= config.beta
    return None


def _center(program, x, mu, config: SolverConfig, tracker: _Tracker, phase: str):
    """
    Newton iterations on the barrier subproblem.

    Returns (x, outcome, stationarity, floor) with outcome one of 'centred',
    'stalled' or 'capped'. stationarity belongs to the returned x and floor
    is the rounding floor there, capped at FLOOR_CAP * tol_kkt.
    """
    stalls = 0
    best = math.inf
    while True:
        f, grad_f, hess_f = program.objective(x)
        c = program.values(x)
        J = program.jacobian(x)
        inv = 1.0 / (-c)
        lam = mu * inv
        grad = grad_f + J.T @ lam
        stationarity, scale = _scaled_residual(grad_f, J, lam)
        floor = min(_rounding_floor(program, x, J, lam, c, scale), FLOOR_CAP * config.tol_kkt)
        if stationarity <= max(0.1 * config.tol_kkt, 1e-2 * mu, floor):
            return x, 'centred', stationarity, floor
        if stationarity < 0.5 * best:
            best, stalls = stationarity, 0
        else:
            stalls += 1
            if stalls > 8:
                return x, 'stalled', stationarity, floor
        if tracker.exhausted:
            return x, 'capped', stationarity, floor

        hess = hess_f + (J.T * (lam * inv)) @ J
        curvature = program.curvature(x, lam)
        if curvature is not None:
            hess = hess + curvature
        step, pd = _newton_direction(hess, grad)
        tracker.hessian_pd &= pd

        phi = f - mu * float(np.sum(np.log(-c)))
        slope = float(grad @ step)
        if slope >= 0.0:
            return x, 'stalled', stationarity, floor
        t = _line_search(program, x, step, mu, phi, slope, config)
        if phase == 'phase1':
            tracker.phase1 += 1
        else:
            tracker.newton += 1
        if config.record_trace:
            tracker.trace.append({'phase': phase, 'mu': mu, 'barrier': phi,
                                  'stationarity': stationarity, 'step': 0.0 if t is None else t})
        if t is None:
            return x, 'stalled', stationarity, floor
        x = x + t * step


def _barrier_minimize(program, x, mu_start, config: SolverConfig, tracker: _Tracker, phase: str, stop=None):
    """
    Follow the central path from mu_start down to tol_kkt.

    A level is accepted when its centring reaches max(tol_kkt, rounding
    floor). When a later level stalls, the last accepted level is returned
    as optimal.
    """
    accepted = None
    level = 0
    while True:
        mu = mu_start * config.mu_shrink ** level
        x, outcome, stationarity, floor = _center(program, x, mu, config, tracker, phase)
        logger.debug("%s: mu=%.3e %s newton=%d stationarity=%.2e floor=%.2e",
                     phase, mu, outcome, tracker.newton + tracker.phase1, stationarity, floor)
        if outcome == 'capped':
            return x, mu, 'max_iter'
        if stop is not None and stop(x):
            return x, mu, 'stopped'
        if stationarity <= max(config.tol_kkt, floor):
            accepted = (x, mu)
            if config.mu_reached(mu):
                return x, mu, 'optimal'
        elif outcome == 'stalled':
            if accepted is not None:
                logger.debug("%s: centring stalled at mu=%.3e, keeping mu=%.3e", phase, mu, accepted[1])
                return accepted[0], accepted[1], 'optimal'
            if config.mu_reached(mu):
                return x, mu, 'stalled'
        level += 1


def _phase_one(program: _RiskProgram, x0: np.ndarray, config: SolverConfig, tracker: _Tracker):
    """Returns (x, feasible, certificate)."""
    if not program.in_domain(x0):
        raise ConfigurationError("phase-1 start has a risk level outside (0, 1)")
    c0 = program.values(x0)
    if np.any(c0[~program.relaxable] >= 0.0):
        raise ConfigurationError("phase-1 start violates the risk floor or budget")
    s0 = max(float(np.max(c0[program.relaxable], initial=-0.5)), -0.5) + 1.0

    wrapper = _PhaseOneProgram(program, anchor=x0.copy(), prox=config.phase1_prox)
    x, mu, status = _barrier_minimize(
        wrapper, np.concatenate([x0, [s0]]), config.mu0, config, tracker, 'phase1',
        stop=lambda point: point[-1] < 0.0,
    )
    inner = x[:-1]
    if status == 'stopped':
        return inner, True, None
    excess = np.maximum(program.values(inner)[program.relaxable], 0.0)
    certificate = {
        'max_excess': float(x[-1]),
        'total_excess': float(excess.sum()),
        'phase1_status': status,
    }
    return inner, False, certificate


def _warm_mu(program: _RiskProgram, x, config: SolverConfig) -> float:
    """Barrier parameter that centres a strictly feasible warm point, or mu0 * warm_mu_factor."""
    ceiling = config.mu0 * config.warm_mu_factor
    c = program.values(x)
    if not c.size:
        return ceiling
    _, grad_f, _ = program.objective(x)
    a = program.jacobian(x).T @ (1.0 / -c)
    norm = float(a @ a)
    fit = -float(a @ grad_f) / norm if norm > 0.0 else 0.0
    if not fit > 0.0:
        return ceiling
    fit = min(fit, ceiling)
    stationarity, _, _ = _stationarity(program, x, fit)
    if stationarity <= WARM_CENTERED:
        return max(fit, config.tol_kkt)
    return ceiling


# ============================================================================
# Exact QP polish
# ============================================================================

def _qp_on_active_set(program: _RiskProgram, active: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    n = program.n
    A = program.K[active]
    if active.size:
        kkt = np.block([[program.H, A.T], [A, np.zeros((active.size, active.size))]])
    else:
        kkt = program.H
    rhs = np.concatenate([-program.g, -program.k0[active]])
    try:
        sol, *_ = linalg.lstsq(kkt, rhs, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        return None
    lam = np.zeros(program.m)
    lam[active] = sol[n:]
    return sol[:n], lam


def _qp_verified(program: _RiskProgram, z, lam, config: SolverConfig) -> bool:
    c = program.K @ z + program.k0
    if np.any(c > 1e3 * ROUNDING * program.magnitude(z)):
        return False
    if np.any(lam < -config.tol_kkt * (1.0 + float(np.max(np.abs(lam), initial=0.0)))):
        return False
    stationarity, _ = _scaled_residual(program.H @ z + program.g, program.K, lam)
    return stationarity <= config.tol_kkt


def _polish(program: _RiskProgram, x, mu, config: SolverConfig) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    Exact optimum of a barrier-solved QP.

    The barrier point leaves rows with zero multiplier about sqrt(mu) short
    of their bound. The rows whose multiplier exceeds their slack are taken
    as the active set and the equality-constrained QP is solved on it; when
    that does not verify, the active-set solver is run from the barrier
    point. Returns (z, multipliers) or None.
    """
    c = program.values(x)
    lam = mu / (-c)
    candidate = _qp_on_active_set(program, np.flatnonzero(lam >= -c))
    if candidate is not None and _qp_verified(program, *candidate, config):
        return candidate[0], np.maximum(candidate[1], 0.0)

    qp = ActiveSetSolver(max_iter=2 * (program.m + program.n) + 10)
    try:
        result = qp.solve(program.H, program.g, program.K, -program.k0, x0=x)
    except (np.linalg.LinAlgError, ConfigurationError) as exc:
        logger.debug("QP polish skipped: %s", exc)
        return None
    if result['status'] == 'optimal' and _qp_verified(program, result['x'], result['multipliers'], config):
        return result['x'], np.maximum(result['multipliers'], 0.0)
    logger.debug("QP polish did not verify; keeping the barrier point")
    return None


# ============================================================================
# Packaging and driver
# ============================================================================

def _package(program: _RiskProgram, x, mu, status, tracker: _Tracker, problem: RiskProblem,
             certificate=None, residual=None, lam_all=None) -> Solution:
    z, delta = program.split(x)
    c = program.values(x)
    polished = lam_all is not None
    if lam_all is None:
        with np.errstate(divide="ignore"):
            lam_all = np.where(c < 0.0, mu / np.where(c < 0.0, -c, 1.0), 0.0)
    multipliers = {name: lam_all[sl].copy() for name, sl in program.slices.items()}
    lam_budget = float(multipliers['budget'][0]) if multipliers['budget'].size else 0.0
    quad = problem.objective_quadratic(z)
    total = quad + (problem.w_delta * problem.regularizer.value(delta) if delta.size else 0.0)
    if residual is None:
        _, grad_f, _ = program.objective(x)
        residual, _ = _scaled_residual(grad_f, program.jacobian(x), lam_all)
        residual = max(residual, 0.0 if polished else mu, float(np.max(c, initial=0.0)))
    n_v = problem.n_v_total
    return Solution(
        v_hat=z[:n_v].copy(), gamma_hat=z[n_v:].copy(), delta=delta.copy(),
        multipliers=multipliers, lam=lam_budget, objective=float(total),
        objective_quadratic=quad, kkt_residual=float(residual), status=status,
        iterations=tracker.newton, phase1_iterations=tracker.phase1,
        hessian_pd=tracker.hessian_pd, barrier=0.0 if polished else mu, delta_bar=problem.budget.delta_bar,
        layout=problem.layout, certificate=certificate, trace=tuple(tracker.trace),
        duality_gap=0.0 if polished else float(mu * program.m), polished=polished,
    )


def _run(program: _RiskProgram, problem: RiskProblem, config: SolverConfig, warm) -> Solution:
    tracker = _Tracker(config)
    x = program.initial_point(warm)
    mu = config.mu0
    if warm is not None and program.strictly_feasible(x):
        mu = _warm_mu(program, x, config)
    elif not program.strictly_feasible(x):
        x, feasible, certificate = _phase_one(program, x, config, tracker)
        if not feasible:
            status = 'max_iter' if certificate['phase1_status'] == 'max_iter' else 'infeasible'
            logger.info("phase 1 found no strictly feasible point: %s", certificate)
            return _package(program, x, config.mu0, status, tracker, problem,
                            certificate=certificate, residual=math.inf)

    x, mu, outcome = _barrier_minimize(program, x, mu, config, tracker, 'main')
    status = 'optimal' if outcome == 'optimal' else 'max_iter'
    polished = _polish(program, x, mu, config) if status == 'optimal' and not program.n_c else None
    if polished is not None:
        solution = _package(program, polished[0], mu, status, tracker, problem, lam_all=polished[1])
    else:
        solution = _package(program, x, mu, status, tracker, problem)
    logger.debug("solve: status=%s newton=%d phase1=%d residual=%.2e polished=%s",
                 status, solution.iterations, solution.phase1_iterations, solution.kkt_residual,
                 solution.polished)
    return solution



# ============================================================================
# Public solves
# ============================================================================

def solve(problem: RiskProblem, config: Optional[SolverConfig] = None,
          warm: Optional[Union[WarmStart, Solution]] = None) -> Solution:
    """Joint optimisation of (v_hat, gamma_hat, delta)."""
    config = config or SolverConfig()
    program = _RiskProgram(problem, with_delta=True, epsilon=config.epsilon_floor)
    return _run(program, problem, config, warm)


def solve_deterministic(problem: RiskProblem, config: Optional[SolverConfig] = None,
                        warm: Optional[Union[WarmStart, Solution]] = None) -> Solution:
    """QP with every row hard at its mean (no risk variables)."""
    config = config or SolverConfig()
    program = _RiskProgram(problem, with_delta=False)
    solution = _run(program, problem, config, warm)
    return replace(solution, delta=np.zeros(0), lam=0.0)


def solve_fixed_risk(problem: RiskProblem, delta_fixed, config: Optional[SolverConfig] = None,
                     warm: Optional[Union[WarmStart, Solution]] = None) -> Solution:
    """QP with chance rows tightened at a given allocation."""
    config = config or SolverConfig()
    delta = np.asarray(delta_fixed, dtype=float).reshape(-1)
    if delta.size != problem.n_c:
        raise ConfigurationError(f"expected {problem.n_c} risk levels, got {delta.size}")
    if delta.size and (np.any(delta <= 0.0) or np.any(delta >= 1.0)):
        raise ConfigurationError(f"fixed risk levels must lie in (0, 1), got {delta}")
    if delta.sum() > problem.budget.delta_bar * (1.0 + 1e-12):
        raise ConfigurationError(
            f"fixed allocation sums to {delta.sum():.6g} > delta_bar={problem.budget.delta_bar}"
        )
    X = problem.tightening(delta) if delta.size else None
    program = _RiskProgram(problem, with_delta=False, chance_X=X)
    solution = _run(program, problem, config, warm)
    regularized = solution.objective_quadratic
    if delta.size and problem.w_delta:
        regularized += problem.w_delta * problem.regularizer.value(delta)
    return replace(solution, delta=delta.copy(), lam=0.0, objective=float(regularized))


def warm_shift(previous: Solution) -> WarmStart:
    """Shift the plan one step, repeat the last block, rescale delta to the budget."""
    layout = previous.layout
    if layout is None:
        raise ConfigurationError("warm shift needs a solution that carries its layout")
    N, n_v, n_xi = layout.N, layout.n_v, layout.n_xi

    def _shift(values, width):
        blocks = np.asarray(values, dtype=float).reshape(N, width)
        return np.vstack([blocks[1:], blocks[-1:]]).reshape(-1)

    v = _shift(previous.v_hat, n_v)
    gamma = _shift(previous.gamma_hat, n_xi)

    keys = layout.chance_keys
    delta = np.asarray(previous.delta, dtype=float)
    if delta.size and keys:
        lookup = dict(zip(keys, delta))
        shifted = np.array([lookup.get((block, min(k + 1, N - 1), i), lookup[(block, k, i)])
                            for block, k, i in keys])
        delta = shifted * (previous.delta_bar / shifted.sum())
    return WarmStart(v_hat=v, gamma_hat=gamma, delta=delta, chance_keys=keys)


# ============================================================================
# Diagnostics
# ============================================================================

def kkt_report(problem: RiskProblem, solution: Solution, config: Optional[SolverConfig] = None,
               probe: bool = True) -> Dict:
    """Stationarity, complementarity, budget tightness and a continuity probe in xi0."""
    config = config or SolverConfig()
    program = _RiskProgram(problem, with_delta=True, epsilon=config.epsilon_floor)
    x = np.concatenate([solution.v_hat, solution.gamma_hat, solution.delta[:program.n_c]])
    mu = solution.barrier

    _, grad_f, _ = program.objective(x)
    c = program.values(x)
    J = program.jacobian(x)
    stored = [solution.multipliers.get(name, np.zeros(0)) for name in program.GROUPS]
    if sum(np.size(block) for block in stored) == program.m:
        lam = np.concatenate([np.asarray(block, dtype=float) for block in stored])
    else:
        lam = max(mu, 1e-300) / (-c)
    stationarity, scale = _scaled_residual(grad_f, J, lam)
    floor = _rounding_floor(program, x, J, lam, c, scale) if mu > 0.0 else 0.0
    complementarity = float(np.max(np.abs(lam * c), initial=0.0))

    report = {
        'status': solution.status,
        'stationarity': stationarity,
        'stationarity_floor': floor,
        'complementarity': complementarity,
        'primal_violation': float(max(np.max(c, initial=-np.inf), 0.0)),
        'lambda': solution.lam,
        'lambda_positive': bool(solution.lam > 0.0),
        'budget_slack': solution.budget_slack,
        'budget_tight': bool(abs(solution.budget_slack) <= 1e-6) if program.n_c else None,
        'dual_feasible': bool(np.all(lam >= 0.0)),
        'licq_condition': None,
        'licq_degenerate': False,
        'lipschitz_ratio': None,
        'status_changed': False,
    }

    active = lam >= math.sqrt(mu) if mu > 0.0 else lam > 0.0
    J_active = J[active]
    if J_active.shape[0] > J_active.shape[1]:
        condition = math.inf
    elif J_active.shape[0] == 0:
        condition = 1.0
    else:
        condition = float(np.linalg.cond(J_active @ J_active.T))
    report['licq_condition'] = condition
    report['licq_degenerate'] = bool(condition > config.licq_condition)

    if not probe or solution.status != 'optimal':
        return report
    if report['licq_degenerate']:
        logger.warning("LICQ degenerate (condition %.2e); continuity probe skipped", condition)
        return report

    xi0 = np.asarray(problem.xi0, dtype=float)
    direction = np.ones_like(xi0) / math.sqrt(max(xi0.size, 1))
    ratios, changed = [], False
    for sign in (1.0, -1.0):
        d = sign * config.lipschitz_step * direction
        perturbed = solve(problem.with_initial_state(xi0 + d), config, warm=solution)
        changed |= perturbed.status != solution.status
        ratios.append(float(np.linalg.norm(perturbed.vector - solution.vector) / np.linalg.norm(d)))
    report['lipschitz_ratio'] = max(ratios)
    report['status_changed'] = bool(changed)
    return report
