"""Exception types shared across the package."""


class PatchLabError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PatchLabError):
    """A primitive received operands with incompatible shapes."""


class NumericError(PatchLabError):
    """A primitive produced NaN or Inf."""


class StateError(PatchLabError):
    """An operation was called out of order (e.g. backward before forward)."""


class ConfigError(PatchLabError):
    """Invalid configuration value or unknown configuration key."""


class DataError(PatchLabError):
    """A dataset or manifest violates a precondition."""


class MetricUndefined(PatchLabError):
    """A metric was requested on degenerate input (e.g. single-class AP)."""


class ContractViolation(PatchLabError):
    """An invariant that callers rely on was broken (e.g. a frozen model changed)."""
