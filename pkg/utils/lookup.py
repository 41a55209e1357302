"""
Monotone lookup tables
Piecewise-linear maps of requested speed, held flat outside the table
"""

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from core.exceptions import ConfigurationError


@dataclass(frozen=True, eq=False)
class MonotoneLookup:
    """
    y(x) by linear interpolation between breakpoints.

    Breakpoints must be strictly increasing and the values monotone
    (either direction). Outside the table the end values are held.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.breakpoints, dtype=float)
        y = np.asarray(self.values, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise ConfigurationError(
                f"lookup needs matching 1-D breakpoints/values with >= 2 entries, got {x.shape} and {y.shape}"
            )
        if np.any(np.diff(x) <= 0):
            raise ConfigurationError(f"lookup breakpoints must be strictly increasing: {x.tolist()}")
        step = np.diff(y)
        if not (np.all(step >= 0) or np.all(step <= 0)):
            raise ConfigurationError(f"lookup values must be monotone: {y.tolist()}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ConfigurationError("lookup entries must be finite")
        object.__setattr__(self, 'breakpoints', x)
        object.__setattr__(self, 'values', y)

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.breakpoints, self.values)

    @property
    def increasing(self) -> bool:
        return bool(self.values[-1] >= self.values[0])

    @property
    def range(self):
        return float(self.values.min()), float(self.values.max())

    def to_dict(self) -> Dict:
        return {'breakpoints': self.breakpoints.tolist(), 'values': self.values.tolist()}

    @classmethod
    def from_pairs(cls, breakpoints: Sequence[float], values: Sequence[float]) -> 'MonotoneLookup':
        return cls(np.asarray(breakpoints, dtype=float), np.asarray(values, dtype=float))
