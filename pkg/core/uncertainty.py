"""
Uncertainty Model
Scenario sets, moment estimates, psi tightening and concentration-bound checks
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from core.exceptions import ConfigurationError, DomainError, SingularityError

logger = logging.getLogger(__name__)

MC_SIGMAS = 3.0


def mc_margin(p: float, n_samples: int) -> float:
    """Three-sigma binomial error bar around the nominal level p."""
    return MC_SIGMAS * math.sqrt(max(p * (1.0 - p), 0.0) / n_samples)


# ============================================================================
# Scenario sets and moments
# ============================================================================

@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """S sampled trajectories theta_hat, stored as (S, N+1, n_theta)."""

    samples: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 2:
            raise ConfigurationError(
                f"scenario samples need shape (S, N+1, n_theta), got {np.shape(self.samples)}"
            )
        object.__setattr__(self, 'samples', arr)

    @property
    def S(self) -> int:
        return self.samples.shape[0]

    @property
    def horizon(self) -> int:
        return self.samples.shape[1] - 1

    @property
    def n_theta(self) -> int:
        return self.samples.shape[2]

    def mean_trajectory(self) -> 'ScenarioSet':
        return ScenarioSet(self.samples.mean(axis=0, keepdims=True), seed=self.seed)

    def to_frame(self) -> pd.DataFrame:
        S, length, n_theta = self.samples.shape
        if n_theta == 1:
            columns = [f"theta_{k}" for k in range(length)]
        else:
            columns = [f"theta_{k}_{i}" for k in range(length) for i in range(n_theta)]
        return pd.DataFrame(self.samples.reshape(S, -1), columns=columns)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format='%.12g')

    @classmethod
    def from_csv(cls, path, n_theta: int = 1, seed: Optional[int] = None) -> 'ScenarioSet':
        frame = pd.read_csv(path)
        values = frame.to_numpy(dtype=float)
        if values.shape[1] % n_theta:
            raise ConfigurationError(f"{values.shape[1]} columns do not split into n_theta={n_theta}")
        return cls(values.reshape(values.shape[0], -1, n_theta), seed=seed)


@dataclass(frozen=True, eq=False)
class MomentSummary:
    """
    Per-row statistics of X_j over a scenario set.

    Pruned rows carry mean -inf and variance 0. ``lower``/``upper`` are the
    sample range, used as support bounds in bounded-support mode.
    """

    mean: np.ndarray
    var: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    pruned: np.ndarray
    theta_dependent: np.ndarray
    n_samples: int
    tracking_mean: Optional[np.ndarray] = None

    @property
    def n_X(self) -> int:
        return self.mean.shape[0]


def estimate_moments(scenarios: ScenarioSet, offset_builder) -> MomentSummary:
    """
    Sample mean and unbiased variance of X_j(theta_hat^(s)).

    Rows the builder reports as theta-independent get variance exactly 0.
    A single-trajectory set is treated as deterministic.
    """
    X = np.asarray(offset_builder(scenarios.samples), dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    S, n_X = X.shape

    vacuous = np.isneginf(X)
    pruned = vacuous.all(axis=0)
    if (vacuous.any(axis=0) & ~pruned).any():
        raise ConfigurationError("some rows are infinite for part of the scenarios only")
    if not np.isfinite(X[:, ~pruned]).all():
        raise ConfigurationError("offset vector has +inf or NaN entries on active rows")

    Xa = np.where(pruned, 0.0, X)
    mean = Xa.mean(axis=0)
    var = Xa.var(axis=0, ddof=1) if S >= 2 else np.zeros(n_X)
    lower = Xa.min(axis=0)
    upper = Xa.max(axis=0)

    flat = np.ptp(Xa, axis=0) == 0.0
    mean[flat] = Xa[0, flat]
    var[flat] = 0.0

    theta_dependent = getattr(offset_builder, 'theta_dependent', None)
    if theta_dependent is None:
        theta_dependent = np.ones(n_X, dtype=bool)
    theta_dependent = np.asarray(theta_dependent, dtype=bool)
    fixed = ~theta_dependent
    mean[fixed] = Xa[0, fixed]
    var[fixed] = 0.0
    lower[fixed] = mean[fixed]
    upper[fixed] = mean[fixed]

    mean[pruned] = -np.inf
    var[pruned] = 0.0

    tracking_mean = None
    if hasattr(offset_builder, 'tracking_offset'):
        tracking_mean = np.asarray(offset_builder.tracking_offset(scenarios.samples)).mean(axis=0)

    return MomentSummary(
        mean=mean, var=var, lower=lower, upper=upper, pruned=pruned,
        theta_dependent=theta_dependent & ~pruned, n_samples=S,
        tracking_mean=tracking_mean,
    )


# ============================================================================
# Laws with closed-form quantiles
# ============================================================================

class TruncatedLogNormal:
    """exp(mu + sigma Z) with Z a standard normal truncated to [a, b]."""

    name = 'truncated_lognormal'

    def __init__(self, mu: float = 0.0, sigma: float = 0.5, a: float = -2.0, b: float = 2.0):
        if sigma <= 0 or a >= b:
            raise ConfigurationError(f"invalid truncated lognormal (sigma={sigma}, a={a}, b={b})")
        self.mu, self.sigma, self.a, self.b = mu, sigma, a, b
        self._z = stats.truncnorm(a, b)

    def _to_z(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide='ignore', invalid='ignore'):
            return np.where(x > 0, (np.log(np.where(x > 0, x, 1.0)) - self.mu) / self.sigma, -np.inf)

    def rvs(self, size=None, random_state=None):
        return np.exp(self.mu + self.sigma * self._z.rvs(size=size, random_state=random_state))

    def cdf(self, x):
        return self._z.cdf(self._to_z(x))

    def ppf(self, p):
        return np.exp(self.mu + self.sigma * self._z.ppf(p))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide='ignore', invalid='ignore'):
            return np.where(x > 0, self._z.pdf(self._to_z(x)) / (self.sigma * np.where(x > 0, x, 1.0)), 0.0)

    def mean(self) -> float:
        return float(self._z.expect(lambda z: np.exp(self.mu + self.sigma * z)))

    def var(self) -> float:
        second = float(self._z.expect(lambda z: np.exp(2.0 * (self.mu + self.sigma * z))))
        return second - self.mean() ** 2

    def support(self):
        return math.exp(self.mu + self.sigma * self.a), math.exp(self.mu + self.sigma * self.b)


def _law_name(dist) -> str:
    inner = getattr(dist, 'dist', None)
    return getattr(inner, 'name', None) or getattr(dist, 'name', type(dist).__name__)


@dataclass(frozen=True, eq=False)
class CdfLaw:
    """
    Distribution of X_j with an exact quantile.

    ``dist`` is a (possibly vectorised) frozen scipy distribution or any
    object exposing cdf/ppf/pdf. ``x_star`` is the point after which the
    density is nonincreasing.
    """

    dist: object
    x_star: Union[float, np.ndarray, None] = None

    def quantile(self, p):
        return self.dist.ppf(p)

    def density(self, x):
        return self.dist.pdf(x)

    def density_slope(self, x):
        name = _law_name(self.dist)
        x = np.asarray(x, dtype=float)
        if name == 'norm':
            loc, scale = self.dist.mean(), self.dist.std()
            return -(x - loc) / scale ** 2 * self.dist.pdf(x)
        if name == 'expon':
            return -self.dist.pdf(x) / self.dist.std()
        if name == 'uniform':
            return np.zeros_like(x)
        h = 1e-6 * (1.0 + np.abs(x))
        return (self.dist.pdf(x + h) - self.dist.pdf(x - h)) / (2.0 * h)


def gaussian_law(mean, std) -> CdfLaw:
    return CdfLaw(stats.norm(loc=mean, scale=std), x_star=mean)


def uniform_law(lower, upper) -> CdfLaw:
    lower = np.asarray(lower, dtype=float)
    return CdfLaw(stats.uniform(loc=lower, scale=np.asarray(upper) - lower), x_star=lower)


def exponential_law(loc, scale) -> CdfLaw:
    return CdfLaw(stats.expon(loc=loc, scale=scale), x_star=loc)


# ============================================================================
# Distribution modes
# ============================================================================

@dataclass(frozen=True, eq=False)
class RowMoments:
    """What a mode needs to know about one row (fields may be arrays over rows)."""

    mean: Union[float, np.ndarray] = 0.0
    var: Union[float, np.ndarray] = 0.0
    lower: Union[float, np.ndarray, None] = None
    upper: Union[float, np.ndarray, None] = None
    law: Optional[CdfLaw] = None

    def take(self, rows) -> 'RowMoments':
        pick = lambda a: None if a is None else np.asarray(a, dtype=float)[rows]
        return RowMoments(mean=pick(self.mean), var=pick(self.var),
                          lower=pick(self.lower), upper=pick(self.upper), law=self.law)


class DistributionMode:
    """Tightening psi(delta) with P[X > psi(delta)] <= delta."""

    name = 'base'
    tight = False

    def psi(self, row: RowMoments, delta):
        raise NotImplementedError

    def derivatives(self, row: RowMoments, delta):
        raise NotImplementedError

    def delta_conv(self, row: RowMoments):
        raise NotImplementedError

    def row_moments(self, summary: MomentSummary, rows: np.ndarray) -> RowMoments:
        return RowMoments(mean=summary.mean[rows], var=summary.var[rows],
                          lower=summary.lower[rows], upper=summary.upper[rows])

    def dispersed(self, row: RowMoments) -> np.ndarray:
        return np.asarray(row.var) > 0.0

    def __repr__(self):
        return f"{type(self).__name__}()"


class MeanVariance(DistributionMode):
    """Cantelli bound from mean and variance."""

    name = 'mv'

    def psi(self, row, delta):
        delta = np.asarray(delta, dtype=float)
        return row.mean + np.sqrt(np.asarray(row.var) * (1.0 - delta) / delta)

    def derivatives(self, row, delta):
        delta = np.asarray(delta, dtype=float)
        s = np.sqrt(np.asarray(row.var, dtype=float))
        h = np.sqrt((1.0 - delta) / delta)
        d1 = -s * h / (2.0 * delta * (1.0 - delta))
        d2 = s * h * (3.0 - 4.0 * delta) / (4.0 * delta ** 2 * (1.0 - delta) ** 2)
        return d1, d2

    def delta_conv(self, row):
        return np.full(np.shape(row.mean), 0.75) if np.ndim(row.mean) else 0.75


class BoundedSupport(DistributionMode):
    """Hoeffding bound from a support interval [L, U]."""

    name = 'bd'

    def _width(self, row):
        if row.lower is None or row.upper is None:
            raise ConfigurationError("bounded-support mode needs lower and upper bounds")
        width = np.asarray(row.upper, dtype=float) - np.asarray(row.lower, dtype=float)
        if np.any(width < 0):
            raise ConfigurationError("bounded-support mode requires L <= U")
        return width

    def psi(self, row, delta):
        delta = np.asarray(delta, dtype=float)
        return row.mean + self._width(row) / math.sqrt(2.0) * np.sqrt(-np.log(delta))

    def derivatives(self, row, delta):
        delta = np.asarray(delta, dtype=float)
        scale = self._width(row) / math.sqrt(2.0)
        neg_log = -np.log(delta)
        phi = np.sqrt(neg_log)
        d1 = -scale / (2.0 * delta * phi)
        d2 = -scale * (1.0 + 2.0 * np.log(delta)) / (4.0 * delta ** 2 * neg_log ** 1.5)
        return d1, d2

    def delta_conv(self, row):
        value = math.exp(-0.5)
        return np.full(np.shape(row.mean), value) if np.ndim(row.mean) else value

    def dispersed(self, row):
        return self._width(row) > 0.0


class QuantileMode(DistributionMode):
    """Exact quantile psi = F^{-1}(1 - delta); closed-loop rows use a Gaussian fit."""

    name = 'cdf'
    tight = True

    def _law(self, row):
        if row.law is None:
            raise ConfigurationError("quantile mode needs a law for every row")
        return row.law

    def psi(self, row, delta):
        return self._law(row).quantile(1.0 - np.asarray(delta, dtype=float))

    def derivatives(self, row, delta):
        law = self._law(row)
        q = law.quantile(1.0 - np.asarray(delta, dtype=float))
        f = np.asarray(law.density(q), dtype=float)
        if np.any(f <= 0.0):
            raise SingularityError(f"density vanishes at quantile {q}")
        d1 = -1.0 / f
        d2 = -np.asarray(law.density_slope(q), dtype=float) / f ** 3
        return d1, d2

    def delta_conv(self, row):
        law = self._law(row)
        if law.x_star is None:
            raise ConfigurationError("quantile mode needs x_star to locate the convex region")
        return np.minimum(1.0 - np.asarray(law.dist.cdf(law.x_star), dtype=float), 1.0)

    def row_moments(self, summary, rows):
        row = super().row_moments(summary, rows)
        std = np.sqrt(np.asarray(row.var))
        return RowMoments(mean=row.mean, var=row.var, lower=row.lower, upper=row.upper,
                          law=gaussian_law(row.mean, np.where(std > 0, std, 1.0)))


MODES = {
    'mv': MeanVariance,
    'bd': BoundedSupport,
    'cdf': QuantileMode,
}


def make_mode(name: str) -> DistributionMode:
    try:
        return MODES[name]()
    except KeyError:
        raise ConfigurationError(f"unknown distribution mode '{name}', expected one of {sorted(MODES)}")


def _check_delta(delta):
    d = np.asarray(delta, dtype=float)
    if np.any(~(d > 0.0)) or np.any(~(d < 1.0)):
        raise DomainError(f"risk level must lie in (0, 1), got {delta}")


def psi(mode: DistributionMode, moments_j: RowMoments, delta_j):
    _check_delta(delta_j)
    return mode.psi(moments_j, delta_j)


def psi_derivatives(mode: DistributionMode, moments_j: RowMoments, delta_j):
    _check_delta(delta_j)
    return mode.derivatives(moments_j, delta_j)


def delta_conv(mode: DistributionMode, moments_j: RowMoments):
    return mode.delta_conv(moments_j)


# ============================================================================
# Budget
# ============================================================================

@dataclass(frozen=True)
class RiskBudget:
    delta_bar: float
    epsilon_floor: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.delta_bar < 1.0:
            raise ConfigurationError(f"delta_bar must lie in (0, 1), got {self.delta_bar}")
        if not 0.0 < self.epsilon_floor < self.delta_bar:
            raise ConfigurationError(
                f"epsilon_floor must lie in (0, delta_bar), got {self.epsilon_floor}"
            )

    def check_rows(self, n_c: int):
        if n_c and self.epsilon_floor * n_c >= self.delta_bar:
            raise ConfigurationError(
                f"{n_c} risk-bearing rows cannot each receive {self.epsilon_floor} "
                f"within delta_bar={self.delta_bar}"
            )


def uniform_allocation(budget: RiskBudget, n_c: int) -> np.ndarray:
    """delta_j = delta_bar / n_c."""
    if n_c < 1:
        raise ConfigurationError(f"uniform allocation needs at least one row, got {n_c}")
    share = budget.delta_bar / n_c
    if share < budget.epsilon_floor:
        raise ConfigurationError(
            f"delta_bar/n_c = {share:.3g} falls below epsilon_floor={budget.epsilon_floor}"
        )
    return np.full(n_c, share)


# ============================================================================
# Empirical violation
# ============================================================================

def violation_rates(y: np.ndarray, X: np.ndarray, grouping: Optional[Dict[str, Sequence[int]]] = None,
                    tol: float = 0.0) -> Dict[str, float]:
    """Fraction of samples violating at least one row of each group, plus 'joint'."""
    X = np.atleast_2d(X)
    y = np.asarray(y, dtype=float)
    if grouping is None:
        grouping = {'all': np.arange(X.shape[1])}
    with np.errstate(invalid='ignore'):
        violated = X > y + tol
    hit = np.zeros(X.shape[0], dtype=bool)
    rates = {}
    for name, rows in grouping.items():
        rows = np.asarray(rows, dtype=int)
        group_hit = violated[:, rows].any(axis=1) if rows.size else np.zeros(X.shape[0], dtype=bool)
        rates[name] = float(group_hit.mean())
        hit |= group_hit
    rates['joint'] = float(hit.mean())
    return rates


def empirical_violation(y: np.ndarray, scenarios: ScenarioSet,
                        grouping: Optional[Dict[str, Sequence[int]]],
                        offset_builder, tol: float = 0.0) -> Dict[str, float]:
    """Violation probability of a committed plan y over the scenario set."""
    X = np.asarray(offset_builder(scenarios.samples), dtype=float)
    return violation_rates(y, X, grouping, tol)


# ============================================================================
# Concentration-bound oracles
# ============================================================================

def reference_laws() -> Dict[str, object]:
    return {
        'gaussian': stats.norm(loc=0.0, scale=1.0),
        'uniform': stats.uniform(loc=0.0, scale=1.0),
        'truncated_lognormal': TruncatedLogNormal(),
    }


def law_moments(law) -> RowMoments:
    lower, upper = law.support()
    return RowMoments(mean=float(law.mean()), var=float(law.var()),
                      lower=float(lower), upper=float(upper), law=CdfLaw(law))


def verify_inequality_oracles(mode: DistributionMode, law, delta_grid: Iterable[float],
                              n_samples: int = 100_000, rng=None, name: Optional[str] = None) -> Dict:
    """
    Empirical coverage P[X <= psi(delta)] against 1 - delta for each delta.

    Quantile mode must match 1 - delta within the margin; the other modes
    only need to exceed it. Bounded-support mode is skipped for laws with
    unbounded support.
    """
    rng = np.random.default_rng(rng)
    row = law_moments(law)
    x = np.asarray(law.rvs(size=n_samples, random_state=rng), dtype=float)
    unbounded = not (np.isfinite(row.lower) and np.isfinite(row.upper))

    checks = []
    for delta in delta_grid:
        nominal = 1.0 - delta
        margin = mc_margin(nominal, n_samples)
        if isinstance(mode, BoundedSupport) and unbounded:
            checks.append({'delta': delta, 'skipped': True, 'passed': True,
                           'reason': 'unbounded support'})
            continue
        y = float(psi(mode, row, delta))
        coverage = float(np.mean(x <= y))
        if mode.tight:
            passed = abs(coverage - nominal) <= margin
        else:
            passed = coverage >= nominal - margin
        checks.append({'delta': delta, 'psi': y, 'coverage': coverage, 'nominal': nominal,
                       'margin': margin, 'skipped': False, 'passed': bool(passed)})

    return {
        'mode': mode.name,
        'law': name or _law_name(law),
        'n_samples': n_samples,
        'checks': checks,
        'passed': all(c['passed'] for c in checks),
    }


def verify_boole(mode: DistributionMode, laws: Sequence, deltas: Sequence[float],
                 n_samples: int = 100_000, rng=None) -> Dict:
    """Joint satisfaction of independently tightened rows against 1 - sum(delta)."""
    rng = np.random.default_rng(rng)
    if len(laws) != len(deltas):
        raise ConfigurationError(f"{len(laws)} laws but {len(deltas)} risk levels")
    satisfied = np.ones(n_samples, dtype=bool)
    for law, delta in zip(laws, deltas):
        y = float(psi(mode, law_moments(law), delta))
        satisfied &= np.asarray(law.rvs(size=n_samples, random_state=rng)) <= y
    nominal = max(1.0 - float(np.sum(deltas)), 0.0)
    joint = float(satisfied.mean())
    margin = mc_margin(nominal, n_samples)
    return {
        'mode': mode.name,
        'rows': len(laws),
        'joint_satisfaction': joint,
        'nominal': nominal,
        'margin': margin,
        'passed': joint >= nominal - margin,
    }


def psi_shape_report(mode: DistributionMode, row: RowMoments, n_points: int = 1000,
                     lowest: float = 1e-6) -> Dict:
    """Monotonicity and convexity of psi on a uniform grid over (lowest, delta_conv]."""
    upper = float(np.min(np.atleast_1d(mode.delta_conv(row))))
    upper = min(upper, 1.0 - 1e-9)
    grid = np.linspace(lowest, upper, n_points)
    values = np.asarray(psi(mode, row, grid), dtype=float)

    first = np.diff(values)
    monotone = bool(np.all(first <= 0.0)) if mode.tight else bool(np.all(first < 0.0))
    second = values[:-2] - 2.0 * values[1:-1] + values[2:]
    tolerance = 1e-8 * (1.0 + np.abs(values[1:-1]))
    convex = bool(np.all(second >= -tolerance))

    return {
        'mode': mode.name,
        'delta_conv': upper,
        'monotone': monotone,
        'convex': convex,
        'worst_second_difference': float(np.min(second + tolerance)),
        'passed': monotone and convex,
    }


def derivative_report(mode: DistributionMode, row: RowMoments, grid: Optional[np.ndarray] = None) -> Dict:
    """Central-difference check of the analytic psi derivatives."""
    if grid is None:
        upper = float(np.min(np.atleast_1d(mode.delta_conv(row))))
        grid = np.geomspace(1e-4, min(upper, 0.999) * 0.999, 50)
    worst_first = worst_second = 0.0
    for delta in grid:
        h = 1e-5 * delta
        d1, d2 = psi_derivatives(mode, row, delta)
        fd1 = (psi(mode, row, delta + h) - psi(mode, row, delta - h)) / (2.0 * h)
        up, _ = psi_derivatives(mode, row, delta + h)
        down, _ = psi_derivatives(mode, row, delta - h)
        fd2 = (up - down) / (2.0 * h)
        worst_first = max(worst_first, float(abs(fd1 - d1) / (1.0 + abs(d1))))
        worst_second = max(worst_second, float(abs(fd2 - d2) / (1.0 + abs(d2))))
    return {
        'mode': mode.name,
        'first_error': worst_first,
        'second_error': worst_second,
        'passed': worst_first <= 1e-6 and worst_second <= 1e-4,
    }
