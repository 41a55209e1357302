"""
Exception hierarchy
Every error raised by the library derives from CCMPCError.
"""


class CCMPCError(Exception):
    """Root of all library errors."""


class ConfigurationError(CCMPCError, ValueError):
    """Inconsistent dimensions, weights, budgets or configuration keys."""


class DomainError(CCMPCError, ValueError):
    """A risk level outside the open unit interval."""


class SingularityError(CCMPCError, ArithmeticError):
    """Zero density where a quantile derivative is required."""


class RangeError(CCMPCError, ValueError):
    """Inversion of a monotone map could not bracket its target."""


class SolverError(CCMPCError, RuntimeError):
    """A closed-loop run cannot continue."""
