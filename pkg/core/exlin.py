"""
Exactly Linearizable Models
Monotone state/input transforms, specification mapping and nonlinear rollout
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from core.exceptions import ConfigurationError, RangeError
from core.stacked import BoundFn, LinearModel, SpecBundle, _evaluate

logger = logging.getLogger(__name__)

INVERSION_XTOL = 1e-13
BRACKET_DOUBLINGS = 200


# ============================================================================
# Monotone maps
# ============================================================================

class MonotoneMap:
    """Elementwise strictly increasing map with forward(0) = 0."""

    n: int = 0

    def forward(self, x):
        raise NotImplementedError

    def derivative(self, x):
        raise NotImplementedError

    def inverse(self, y):
        return _invert(self.forward, np.asarray(y, dtype=float), self.n)


def _passthrough_inf(fn, x):
    x = np.asarray(x, dtype=float)
    finite = np.isfinite(x)
    if finite.all():
        return fn(x)
    out = x.copy()
    out[finite] = fn(np.where(finite, x, 0.0))[finite]
    return out


def _invert(forward: Callable, y: np.ndarray, n: int) -> np.ndarray:
    """Channelwise brentq inversion with bracket doubling; +-inf maps to itself."""
    y = np.asarray(y, dtype=float)
    flat = y.reshape(-1, n)
    out = np.empty_like(flat)
    for row in range(flat.shape[0]):
        for i in range(flat.shape[1]):
            target = flat[row, i]
            if not np.isfinite(target):
                out[row, i] = target
                continue

            def residual(value, i=i, row=row, target=target):
                point = np.zeros(flat.shape[1])
                point[i] = value
                return float(forward(point)[i]) - target

            width = max(1.0, abs(target))
            lo, hi = -width, width
            for _ in range(BRACKET_DOUBLINGS):
                if residual(lo) <= 0.0 <= residual(hi):
                    break
                lo, hi = 2.0 * lo, 2.0 * hi
            else:
                raise RangeError(f"could not bracket inverse of {target} on channel {i}")
            if residual(lo) == 0.0:
                out[row, i] = lo
            elif residual(hi) == 0.0:
                out[row, i] = hi
            else:
                out[row, i] = brentq(residual, lo, hi, xtol=INVERSION_XTOL * width, rtol=4 * np.finfo(float).eps,
                                     maxiter=500)
    return out.reshape(y.shape)


class IdentityMap(MonotoneMap):
    def __init__(self, n: int):
        self.n = n

    def forward(self, x):
        return np.asarray(x, dtype=float)

    def derivative(self, x):
        return np.ones_like(np.asarray(x, dtype=float))

    def inverse(self, y):
        return np.asarray(y, dtype=float)


class CubicMonotoneMap(MonotoneMap):
    """f_i(x) = a_i x + b_i x^3 with a_i > 0, b_i >= 0."""

    def __init__(self, a: Sequence[float], b: Sequence[float]):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        if self.a.shape != self.b.shape:
            raise ConfigurationError(f"cubic map needs matching a/b, got {self.a.shape} and {self.b.shape}")
        if np.any(self.a <= 0) or np.any(self.b < 0):
            raise ConfigurationError(f"cubic map needs a > 0 and b >= 0, got a={self.a}, b={self.b}")
        self.n = self.a.size

    def forward(self, x):
        return _passthrough_inf(lambda v: self.a * v + self.b * v ** 3, x)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return self.a + 3.0 * self.b * x ** 2

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if not np.any(self.b):
            return y / self.a
        return _invert(self.forward, y, self.n)

    def to_dict(self) -> Dict:
        return {'a': self.a.tolist(), 'b': self.b.tolist()}


class ReflectedMap(MonotoneMap):
    """x -> s * f(s * x) for a sign vector s; stays increasing."""

    def __init__(self, base: MonotoneMap, sign: np.ndarray):
        self.base = base
        self.sign = np.asarray(sign, dtype=float)
        self.n = base.n

    def forward(self, x):
        return self.sign * self.base.forward(self.sign * np.asarray(x, dtype=float))

    def derivative(self, x):
        return self.base.derivative(self.sign * np.asarray(x, dtype=float))

    def inverse(self, y):
        return self.sign * self.base.inverse(self.sign * np.asarray(y, dtype=float))


class StateScaledInputMap:
    """
    Psi(u; x) = s(x) * base(u) with s(x) > 0 elementwise.

    The default scale is s_i(x) = 1 + kappa_i * expit(w_i . x); kappa = 0
    gives a state-independent map.
    """

    def __init__(self, base: MonotoneMap, w=None, kappa=None,
                 scale_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        self.base = base
        self.n = base.n
        self.scale_fn = scale_fn
        self.w = None if w is None else np.atleast_2d(np.asarray(w, dtype=float))
        self.kappa = np.zeros(self.n) if kappa is None else np.atleast_1d(np.asarray(kappa, dtype=float))
        if np.any(self.kappa < 0):
            raise ConfigurationError(f"input scale kappa must be >= 0, got {self.kappa}")
        if self.w is not None and self.w.shape[0] != self.n:
            raise ConfigurationError(f"input scale weights need {self.n} rows, got {self.w.shape}")

    @property
    def state_dependent(self) -> bool:
        return self.scale_fn is not None or bool(np.any(self.kappa) and self.w is not None and np.any(self.w))

    def scale(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.scale_fn is not None:
            s = np.asarray(self.scale_fn(x), dtype=float)
        elif self.w is None:
            s = np.ones(self.n)
        else:
            s = 1.0 + self.kappa * expit(x @ self.w.T)
        if np.any(s <= 0):
            raise ConfigurationError(f"input scale must stay positive, got {s}")
        return s

    def forward(self, u, x):
        return self.scale(x) * self.base.forward(u)

    def inverse(self, v, x):
        return self.base.inverse(np.asarray(v, dtype=float) / self.scale(x))

    def with_state_sign(self, sign: np.ndarray) -> 'StateScaledInputMap':
        if not self.state_dependent:
            return self
        sign = np.asarray(sign, dtype=float)
        inner = self.scale
        return StateScaledInputMap(self.base, scale_fn=lambda x: inner(sign * np.asarray(x, dtype=float)))


# ============================================================================
# Model
# ============================================================================

@dataclass(frozen=True, eq=False)
class ExlinModel:
    """
    x_{k+1} = Phi^-1(A Phi(x_k) + B Psi(u_k; x_k) + c(theta_k)).

    ``c`` is a constant vector or a callable of theta; ``state_sign`` records
    channels whose physical coordinate was negated by :meth:`reflect`.
    """

    phi: MonotoneMap
    psi: StateScaledInputMap
    A: np.ndarray
    B: np.ndarray
    c: Union[np.ndarray, Callable, None] = None
    state_sign: Optional[np.ndarray] = None
    names: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if A.shape != (self.phi.n, self.phi.n) or B.shape != (self.phi.n, self.psi.n):
            raise ConfigurationError(
                f"core shapes A={A.shape}, B={B.shape} do not match Phi ({self.phi.n}) and Psi ({self.psi.n})"
            )
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'B', B)
        if self.state_sign is None:
            object.__setattr__(self, 'state_sign', np.ones(self.phi.n))

    @property
    def n_x(self) -> int:
        return self.phi.n

    @property
    def n_u(self) -> int:
        return self.psi.n

    @property
    def c_theta_dependent(self) -> bool:
        return callable(self.c)

    def bias(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.c is None:
            return np.zeros(theta.shape[:-1] + (self.n_x,))
        if callable(self.c):
            return np.asarray(self.c(theta), dtype=float)
        return np.broadcast_to(np.asarray(self.c, dtype=float), theta.shape[:-1] + (self.n_x,))

    def linear_model(self) -> LinearModel:
        if self.c is None:
            return LinearModel(self.A, self.B)
        return LinearModel(self.A, self.B, bias=self.bias, bias_theta_dependent=self.c_theta_dependent)

    def step(self, x, u, theta) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xi_next = self.A @ self.phi.forward(x) + self.B @ self.psi.forward(u, x) + self.bias(theta)
        return self.phi.inverse(xi_next)

    def input_from_v(self, v, x) -> np.ndarray:
        return self.psi.inverse(v, x)

    def reflect(self, channels: Sequence[int]) -> 'ExlinModel':
        """Same plant expressed in coordinates where the given state channels are negated."""
        sign = np.ones(self.n_x)
        sign[list(channels)] = -1.0
        T = np.diag(sign)
        c = self.c
        if callable(c):
            inner = c
            c = lambda theta: inner(theta) * sign
        elif c is not None:
            c = np.asarray(c, dtype=float) * sign
        return ExlinModel(
            phi=ReflectedMap(self.phi, sign), psi=self.psi.with_state_sign(sign),
            A=T @ self.A @ T, B=T @ self.B, c=c, state_sign=self.state_sign * sign, names=self.names,
        )

    @classmethod
    def from_parameters(cls, params: Dict) -> 'ExlinModel':
        phi = CubicMonotoneMap(params['phi_a'], params['phi_b'])
        d = np.asarray(params['psi_d'], dtype=float)
        psi = StateScaledInputMap(CubicMonotoneMap(np.ones_like(d), d),
                                  w=params.get('psi_w'), kappa=params.get('psi_kappa'))
        return cls(phi=phi, psi=psi, A=params['A'], B=params['B'], c=params.get('c'))


# ============================================================================
# Specification mapping
# ============================================================================

def _mapped(fn: BoundFn, transform: Callable, n: int) -> BoundFn:
    def _bound(theta, k):
        theta = np.asarray(theta, dtype=float)
        return transform(np.array(_evaluate(fn, theta, k, n)))

    return _bound


@dataclass(frozen=True, eq=False)
class TransformedSpec:
    """
    State families in xi coordinates; input bounds kept in u coordinates
    until a reference trajectory resolves them.
    """

    spec: SpecBundle
    u_lo: BoundFn
    u_hi: BoundFn
    state_dependent_inputs: bool

    def bind(self, model: ExlinModel, xi_ref=None, strategy: str = 'shifted') -> SpecBundle:
        v_lo, v_hi = resolve_input_bounds(self, model, xi_ref, strategy)
        return self.spec.with_bounds(v_lo=v_lo, v_hi=v_hi)


def transform_spec(spec: SpecBundle, model: ExlinModel) -> TransformedSpec:
    """Map x/u-space bounds through Phi (states) and, when possible, Psi (inputs)."""
    n_x, n_u = model.n_x, model.n_u
    to_xi = model.phi.forward
    states = spec.with_bounds(
        xi_req=_mapped(spec.xi_req, to_xi, n_x),
        xi_lo=_mapped(spec.xi_lo, to_xi, n_x),
        xi_hi=_mapped(spec.xi_hi, to_xi, n_x),
        xi_soft_hi=_mapped(spec.xi_soft_hi, to_xi, n_x),
    )
    state_dependent = model.psi.state_dependent
    if not state_dependent:
        zero = np.zeros(n_x)
        states = states.with_bounds(
            v_lo=_mapped(spec.v_lo, lambda u: model.psi.forward(u, zero), n_u),
            v_hi=_mapped(spec.v_hi, lambda u: model.psi.forward(u, zero), n_u),
        )
    return TransformedSpec(spec=states, u_lo=spec.v_lo, u_hi=spec.v_hi,
                           state_dependent_inputs=state_dependent)


def resolve_input_bounds(tspec: TransformedSpec, model: ExlinModel, xi_ref=None,
                         strategy: str = 'shifted') -> Tuple[BoundFn, BoundFn]:
    """
    v bounds per step from u bounds and a reference state trajectory.

    ``xi_ref`` holds xi_0..xi_{N-1} of the reference (row k is the state at
    which v_k acts). Under 'first_step_only' only k = 0 is bounded.
    """
    if strategy not in ('shifted', 'first_step_only'):
        raise ConfigurationError(f"unknown input-bound strategy '{strategy}'")
    n_u = model.n_u
    if not tspec.state_dependent_inputs and strategy == 'shifted':
        return tspec.spec.v_lo, tspec.spec.v_hi

    if xi_ref is None:
        x_ref = np.zeros((1, model.n_x))
    else:
        x_ref = model.phi.inverse(np.atleast_2d(np.asarray(xi_ref, dtype=float)))

    def _resolved(fn: BoundFn, fill: float) -> BoundFn:
        def _bound(theta, k):
            theta = np.asarray(theta, dtype=float)
            u = np.array(_evaluate(fn, theta, k, n_u))
            if strategy == 'first_step_only' and k > 0:
                return np.full(u.shape, fill)
            x = x_ref[min(k, x_ref.shape[0] - 1)]
            return model.psi.forward(u, x)

        return _bound

    return _resolved(tspec.u_lo, -np.inf), _resolved(tspec.u_hi, np.inf)


def reference_trajectory(model: ExlinModel, x_now, previous_xi: Optional[np.ndarray], N: int) -> np.ndarray:
    """
    Shifted reference [Phi(x_now), xi_2, ..., xi_N] from the last plan, or
    Phi(x_now) held over the horizon when no plan exists yet.
    """
    xi_now = model.phi.forward(np.asarray(x_now, dtype=float))
    if previous_xi is None:
        return np.tile(xi_now, (N, 1))
    planned = np.asarray(previous_xi, dtype=float).reshape(-1, model.n_x)
    # planned holds xi_1..xi_N of the previous solve; xi_1 is now measured
    return np.vstack([xi_now[None, :], planned[1:N]])


def rollout_nonlinear(model: ExlinModel, x0, u_hat, theta) -> np.ndarray:
    """Step the nonlinear plant; returns [x_1; ...; x_N]."""
    th = np.asarray(getattr(theta, 'samples', theta), dtype=float)
    if th.ndim == 1:
        th = th[:, None]
    u = np.asarray(u_hat, dtype=float).reshape(-1, model.n_u)
    x = np.asarray(x0, dtype=float)
    out = []
    for k in range(u.shape[0]):
        x = model.step(x, u[k], th[k])
        out.append(x)
    return np.concatenate(out)


def inputs_from_plan(model: ExlinModel, x0, v_hat, theta) -> np.ndarray:
    """u_k = Psi^-1(v_k; x_k) along the nonlinear rollout the plan produces."""
    th = np.asarray(getattr(theta, 'samples', theta), dtype=float)
    if th.ndim == 1:
        th = th[:, None]
    v = np.asarray(v_hat, dtype=float).reshape(-1, model.n_u)
    x = np.asarray(x0, dtype=float)
    inputs = []
    for k in range(v.shape[0]):
        u = model.input_from_v(v[k], x)
        inputs.append(u)
        x = model.step(x, u, th[k])
    return np.concatenate(inputs)
