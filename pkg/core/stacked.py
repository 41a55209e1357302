"""
Stacked Prediction Model
Horizon-condensed dynamics and the constraint vectors X(theta) <= y(v, gamma)
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from core.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

BiasFn = Callable[[np.ndarray], np.ndarray]
BoundFn = Callable[[np.ndarray, int], np.ndarray]

# Fixed block order of X and y.
BLOCKS = ('state_lo', 'state_hi', 'input_lo', 'input_hi', 'soft')

# SpecBundle bound family feeding each block.
BLOCK_FAMILY = {
    'state_lo': 'xi_lo',
    'state_hi': 'xi_hi',
    'input_lo': 'v_lo',
    'input_hi': 'v_hi',
    'soft': 'xi_soft_hi',
}


# ============================================================================
# Bound helpers
# ============================================================================

def constant(values) -> BoundFn:
    """Bound that ignores theta and the step index."""
    arr = np.asarray(values, dtype=float)

    def _bound(theta: np.ndarray, k: int) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.broadcast_to(arr, theta.shape[:-1] + arr.shape).copy()

    return _bound


def of_theta(fn: Callable[[np.ndarray], np.ndarray]) -> BoundFn:
    """Bound depending on theta only (same at every step)."""

    def _bound(theta: np.ndarray, k: int) -> np.ndarray:
        return np.asarray(fn(np.asarray(theta, dtype=float)), dtype=float)

    return _bound


def _evaluate(fn: BoundFn, theta: np.ndarray, k: int, n: int) -> np.ndarray:
    out = np.asarray(fn(theta, k), dtype=float)
    target = theta.shape[:-1] + (n,)
    try:
        return np.broadcast_to(out, target)
    except ValueError:
        raise ConfigurationError(
            f"Bound returned shape {out.shape}, expected {target} at step {k}"
        )


def _as_theta_array(theta) -> np.ndarray:
    """Accept a ParameterTrajectory, a ScenarioSet-like object or an array."""
    arr = getattr(theta, 'samples', theta)
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


# ============================================================================
# Domain types
# ============================================================================

@dataclass(frozen=True, eq=False)
class LinearModel:
    """xi_{k+1} = A xi_k + B v_k + c(theta_k)."""

    A: np.ndarray
    B: np.ndarray
    bias: Optional[BiasFn] = None
    bias_theta_dependent: Optional[bool] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigurationError(f"A must be square, got shape {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ConfigurationError(
                f"B has {B.shape[0]} rows but A is {A.shape[0]}x{A.shape[1]}"
            )
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'B', B)
        if self.bias_theta_dependent is None:
            object.__setattr__(self, 'bias_theta_dependent', self.bias is not None)

    @property
    def n_xi(self) -> int:
        return self.A.shape[0]

    @property
    def n_v(self) -> int:
        return self.B.shape[1]

    def c(self, theta: np.ndarray) -> np.ndarray:
        """Bias c(theta), broadcast over leading axes of theta."""
        theta = np.asarray(theta, dtype=float)
        if self.bias is None:
            return np.zeros(theta.shape[:-1] + (self.n_xi,))
        out = np.asarray(self.bias(theta), dtype=float)
        if out.shape[-1:] != (self.n_xi,):
            raise ConfigurationError(
                f"bias returned dimension {out.shape[-1:]} but n_xi={self.n_xi}"
            )
        return np.broadcast_to(out, theta.shape[:-1] + (self.n_xi,))

    def step(self, xi: np.ndarray, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return self.A @ xi + self.B @ v + self.c(theta)


@dataclass(frozen=True, eq=False)
class ParameterTrajectory:
    """theta_0 .. theta_N stored as an (N+1, n_theta) array."""

    samples: np.ndarray

    def __post_init__(self):
        arr = _as_theta_array(self.samples)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ConfigurationError(
                f"parameter trajectory needs shape (N+1, n_theta) with N >= 1, got {arr.shape}"
            )
        object.__setattr__(self, 'samples', arr)

    @property
    def horizon(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def n_theta(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True, eq=False)
class StackedSystem:
    """Condensed prediction xi_hat = A_hat xi0 + B_hat v_hat + c_hat."""

    A_hat: np.ndarray
    B_hat: np.ndarray
    N: int
    model: LinearModel

    @property
    def n_xi(self) -> int:
        return self.model.n_xi

    @property
    def n_v(self) -> int:
        return self.model.n_v

    def predict(self, xi0, v_hat, c_hat=None) -> np.ndarray:
        out = self.A_hat @ np.asarray(xi0, dtype=float) + self.B_hat @ np.asarray(v_hat, dtype=float)
        if c_hat is not None:
            out = out + c_hat
        return out


@dataclass(frozen=True, eq=False)
class SpecBundle:
    """
    Control specification as functions of (theta, k).

    Every bound receives theta with shape (..., n_theta) and the time index of
    the variable it bounds (k = 1..N for states, k = 0..N-1 for inputs) and
    returns (..., n). ``theta_dependent`` maps a family name to a boolean
    mask per channel; families missing from the dict are theta-independent.
    """

    xi_req: BoundFn
    xi_lo: BoundFn
    xi_hi: BoundFn
    v_lo: BoundFn
    v_hi: BoundFn
    xi_soft_hi: BoundFn
    theta_dependent: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def unbounded(cls, n_xi: int, n_v: int) -> 'SpecBundle':
        return cls(
            xi_req=constant(np.zeros(n_xi)),
            xi_lo=constant(np.full(n_xi, -np.inf)),
            xi_hi=constant(np.full(n_xi, np.inf)),
            v_lo=constant(np.full(n_v, -np.inf)),
            v_hi=constant(np.full(n_v, np.inf)),
            xi_soft_hi=constant(np.full(n_xi, np.inf)),
        )

    def depends(self, family: str, n: int) -> np.ndarray:
        mask = self.theta_dependent.get(family)
        if mask is None:
            return np.zeros(n, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n,):
            raise ConfigurationError(
                f"theta_dependent['{family}'] has shape {mask.shape}, expected ({n},)"
            )
        return mask

    def with_bounds(self, **changes) -> 'SpecBundle':
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ConstraintIndexMap:
    """
    Row layout of X and y.

    Global row j of block b, horizon position k (0-based) and channel i is
    ``offset(b) + k * width(b) + i``. Position k means xi_{k+1} for the
    state and soft blocks and v_k for the input blocks. Pruning only flags
    rows; numbering never changes.
    """

    n_xi: int
    n_v: int
    N: int
    pruned: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError(f"horizon must be >= 1, got {self.N}")
        if self.pruned is None:
            object.__setattr__(self, 'pruned', np.zeros(self.n_X, dtype=bool))
        elif np.shape(self.pruned) != (self.n_X,):
            raise ConfigurationError(
                f"pruned mask has shape {np.shape(self.pruned)}, expected ({self.n_X},)"
            )

    @classmethod
    def build(cls, n_xi: int, n_v: int, N: int) -> 'ConstraintIndexMap':
        return cls(n_xi=n_xi, n_v=n_v, N=N)

    @property
    def n_X(self) -> int:
        return 2 * self.N * self.n_xi + 2 * self.N * self.n_v + self.N * self.n_xi

    def width(self, block: str) -> int:
        return self.n_v if block.startswith('input') else self.n_xi

    def block_slice(self, block: str) -> slice:
        start = 0
        for name in BLOCKS:
            size = self.N * self.width(name)
            if name == block:
                return slice(start, start + size)
            start += size
        raise KeyError(block)

    def row(self, block: str, k: int, i: int) -> int:
        return self.block_slice(block).start + k * self.width(block) + i

    def locate(self, j: int) -> Tuple[str, int, int]:
        for name in BLOCKS:
            sl = self.block_slice(name)
            if sl.start <= j < sl.stop:
                k, i = divmod(j - sl.start, self.width(name))
                return name, k, i
        raise IndexError(f"row {j} outside 0..{self.n_X - 1}")

    def rows(self, block: str, channel: Optional[int] = None) -> np.ndarray:
        sl = self.block_slice(block)
        idx = np.arange(sl.start, sl.stop)
        if channel is None:
            return idx
        return idx[channel::self.width(block)]

    @property
    def active(self) -> np.ndarray:
        return ~self.pruned

    def with_pruning(self, mask: np.ndarray) -> 'ConstraintIndexMap':
        mask = np.asarray(mask, dtype=bool)
        return replace(self, pruned=self.pruned | mask)

    def pruned_rows(self) -> List[Tuple[str, int, int]]:
        return [self.locate(int(j)) for j in np.flatnonzero(self.pruned)]


class QuadraticObjective(NamedTuple):
    """0.5 z'Hz + g'z over z = (v_hat, gamma_hat); g = g0 + G_xi0 @ xi0."""

    H: np.ndarray
    g: np.ndarray
    g0: np.ndarray
    G_xi0: np.ndarray
    constant_dropped: bool


@dataclass(frozen=True, eq=False)
class Weights:
    """Per-channel diagonal weights plus the risk-regularizer weight."""

    req: np.ndarray
    v: np.ndarray
    soft: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        for name in ('req', 'v', 'soft'):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    def check(self, n_xi: int, n_v: int):
        if self.req.shape != (n_xi,) or self.soft.shape != (n_xi,) or self.v.shape != (n_v,):
            raise ConfigurationError(
                f"weight shapes req={self.req.shape}, v={self.v.shape}, soft={self.soft.shape} "
                f"do not match n_xi={n_xi}, n_v={n_v}"
            )
        if np.any(self.req < 0):
            raise ConfigurationError(f"tracking weights must be >= 0, got {self.req}")
        if np.any(self.v <= 0):
            raise ConfigurationError(f"input weights must be > 0, got {self.v}")
        if np.any(self.soft <= 0):
            raise ConfigurationError(f"soft-constraint weights must be > 0, got {self.soft}")
        if self.delta < 0:
            raise ConfigurationError(f"risk weight must be >= 0, got {self.delta}")


# ============================================================================
# Operations
# ============================================================================

def stack_dynamics(model: LinearModel, N: int) -> StackedSystem:
    """Row-block i of A_hat is A^{i+1}; block (i, j) of B_hat is A^{i-j} B."""
    if N < 1:
        raise ConfigurationError(f"horizon must be >= 1, got {N}")
    n_xi, n_v = model.n_xi, model.n_v

    powers = [np.eye(n_xi)]
    for _ in range(N):
        powers.append(powers[-1] @ model.A)

    A_hat = np.vstack(powers[1:])
    B_hat = np.zeros((N * n_xi, N * n_v))
    for i in range(N):
        for j in range(i + 1):
            B_hat[i * n_xi:(i + 1) * n_xi, j * n_v:(j + 1) * n_v] = powers[i - j] @ model.B

    return StackedSystem(A_hat=A_hat, B_hat=B_hat, N=N, model=model)


def _stack_bias_array(model: LinearModel, theta: np.ndarray, N: int) -> np.ndarray:
    # theta: (..., N+1, n_theta) -> (..., N*n_xi)
    blocks = []
    acc = None
    for k in range(N):
        ck = model.c(theta[..., k, :])
        acc = ck if acc is None else acc @ model.A.T + ck
        blocks.append(acc)
    return np.concatenate(blocks, axis=-1)


def stack_bias(model: LinearModel, theta) -> np.ndarray:
    """Block k is sum_{i<=k} A^{k-i} c(theta_i); theta_N does not enter."""
    if not isinstance(theta, ParameterTrajectory):
        theta = ParameterTrajectory(theta)
    if theta.horizon < 1:
        raise ConfigurationError("trajectory must hold at least theta_0 and theta_1")
    return _stack_bias_array(model, theta.samples, theta.horizon)


@dataclass(frozen=True, eq=False)
class OffsetBuilder:
    """
    Evaluates X(theta_hat) for one trajectory or a whole batch.

    Accepts arrays shaped (N+1, n_theta) or (S, N+1, n_theta); rows whose bound
    is infinite come out as -inf and count as pruned.
    """

    spec: SpecBundle
    model: LinearModel
    index: ConstraintIndexMap

    def _theta(self, theta) -> np.ndarray:
        arr = _as_theta_array(theta)
        if arr.shape[-2] != self.index.N + 1:
            raise ConfigurationError(
                f"trajectory length {arr.shape[-2]} does not match horizon N={self.index.N}"
            )
        return arr

    def _states(self, fn: BoundFn, th: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [_evaluate(fn, th[..., k + 1, :], k + 1, self.index.n_xi) for k in range(self.index.N)],
            axis=-1,
        )

    def _inputs(self, fn: BoundFn, th: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [_evaluate(fn, th[..., k, :], k, self.index.n_v) for k in range(self.index.N)],
            axis=-1,
        )

    def __call__(self, theta) -> np.ndarray:
        th = self._theta(theta)
        c_hat = _stack_bias_array(self.model, th, self.index.N)
        spec = self.spec
        with np.errstate(invalid='ignore'):
            return np.concatenate([
                self._states(spec.xi_lo, th) - c_hat,
                c_hat - self._states(spec.xi_hi, th),
                self._inputs(spec.v_lo, th),
                -self._inputs(spec.v_hi, th),
                c_hat - self._states(spec.xi_soft_hi, th),
            ], axis=-1)

    def tracking_offset(self, theta) -> np.ndarray:
        """c_hat(theta) - xi_req(theta_1..theta_N)."""
        th = self._theta(theta)
        return _stack_bias_array(self.model, th, self.index.N) - self._states(self.spec.xi_req, th)

    @property
    def theta_dependent(self) -> np.ndarray:
        idx = self.index
        through_bias = bool(self.model.bias_theta_dependent)
        parts = []
        for block in BLOCKS:
            width = idx.width(block)
            mask = self.spec.depends(BLOCK_FAMILY[block], width)
            if not block.startswith('input'):
                mask = mask | through_bias
            parts.append(np.tile(mask, idx.N))
        return np.concatenate(parts)


def build_offset(spec: SpecBundle, model: LinearModel, theta, index: ConstraintIndexMap) -> np.ndarray:
    """X(theta_hat) in block order; pruned rows carry -inf."""
    return OffsetBuilder(spec, model, index)(theta)


def prune(index: ConstraintIndexMap, offset: np.ndarray) -> ConstraintIndexMap:
    """Flag every row that is -inf for all supplied offsets."""
    offset = np.atleast_2d(offset)
    vacuous = np.isneginf(offset)
    mixed = vacuous.any(axis=0) & ~vacuous.all(axis=0)
    if mixed.any():
        rows = [index.locate(int(j)) for j in np.flatnonzero(mixed)[:3]]
        raise ConfigurationError(f"bounds switch between finite and infinite across theta at rows {rows}")
    bad = ~np.isfinite(offset) & ~vacuous
    if bad.any():
        rows = [index.locate(int(j)) for j in np.flatnonzero(bad.any(axis=0))[:3]]
        raise ConfigurationError(f"offset is +inf or NaN at rows {rows}; check bound orientation")
    pruned = index.with_pruning(vacuous.all(axis=0))
    logger.debug("pruned %d of %d constraint rows", int(pruned.pruned.sum()), index.n_X)
    return pruned


def lhs_map(stacked: StackedSystem) -> Tuple[np.ndarray, np.ndarray]:
    """(G, E) with y(v_hat, gamma_hat) = G @ [v_hat; gamma_hat] + E @ xi0."""
    N, n_xi, n_v = stacked.N, stacked.n_xi, stacked.n_v
    P = stacked.B_hat
    Iv = np.eye(N * n_v)
    Ig = np.eye(N * n_xi)
    Zv = np.zeros((N * n_v, N * n_xi))
    Zg = np.zeros((N * n_xi, N * n_xi))
    G = np.block([
        [P, Zg],
        [-P, Zg],
        [Iv, Zv],
        [-Iv, Zv],
        [-P, Ig],
    ])
    A_hat = stacked.A_hat
    zeros = np.zeros((N * n_v, n_xi))
    E = np.vstack([A_hat, -A_hat, zeros, zeros, -A_hat])
    return G, E


def build_lhs(stacked: StackedSystem, xi0, v_hat, gamma_hat,
              index: Optional[ConstraintIndexMap] = None) -> np.ndarray:
    """y = [A xi0 + B v; -(A xi0 + B v); v; -v; gamma - A xi0 - B v]."""
    pred = stacked.predict(xi0, v_hat)
    v_hat = np.asarray(v_hat, dtype=float)
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    y = np.concatenate([pred, -pred, v_hat, -v_hat, gamma_hat - pred])
    if index is not None and y.shape != (index.n_X,):
        raise ConfigurationError(f"y has {y.shape[0]} rows, index expects {index.n_X}")
    return y


def simulate(model: LinearModel, xi0, v_hat, theta) -> np.ndarray:
    """Step the model N times; returns [xi_1; ...; xi_N]."""
    th = _as_theta_array(theta)
    v = np.asarray(v_hat, dtype=float).reshape(-1, model.n_v)
    xi = np.asarray(xi0, dtype=float)
    out = []
    for k in range(v.shape[0]):
        xi = model.step(xi, v[k], th[k])
        out.append(xi)
    return np.concatenate(out)


def build_objective(stacked: StackedSystem, spec: SpecBundle, scenarios,
                    weights: Weights, xi0) -> QuadraticObjective:
    """
    Quadratic objective over z = (v_hat, gamma_hat).

    H = 2(B'W_req B + W_v) (+) 2 W_soft and g carries the sample mean of
    2 E[A xi0 + c_hat - xi_req]' W_req B. The theta-only constant is dropped.
    """
    N, n_xi, n_v = stacked.N, stacked.n_xi, stacked.n_v
    weights.check(n_xi, n_v)

    W_req = np.diag(np.tile(weights.req, N))
    W_v = np.diag(np.tile(weights.v, N))
    W_soft = np.diag(np.tile(weights.soft, N))
    B_hat = stacked.B_hat

    H = np.zeros((N * (n_v + n_xi),) * 2)
    H[:N * n_v, :N * n_v] = 2.0 * (B_hat.T @ W_req @ B_hat + W_v)
    H[N * n_v:, N * n_v:] = 2.0 * W_soft
    H = 0.5 * (H + H.T)

    index = ConstraintIndexMap.build(n_xi, n_v, N)
    samples = _as_theta_array(scenarios)
    if samples.ndim == 2:
        samples = samples[None]
    tracking = OffsetBuilder(spec, stacked.model, index).tracking_offset(samples).mean(axis=0)

    g0 = np.zeros(N * (n_v + n_xi))
    g0[:N * n_v] = 2.0 * B_hat.T @ W_req @ tracking
    G_xi0 = np.zeros((N * (n_v + n_xi), n_xi))
    G_xi0[:N * n_v] = 2.0 * B_hat.T @ W_req @ stacked.A_hat

    g = g0 + G_xi0 @ np.asarray(xi0, dtype=float)
    return QuadraticObjective(H=H, g=g, g0=g0, G_xi0=G_xi0, constant_dropped=True)
