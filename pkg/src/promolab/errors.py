"""Shared exception types.

ValidationError (and subclasses) signal bad inputs or configuration and map
to CLI exit code 1; every other PromolabError maps to exit code 2.
"""


class PromolabError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PromolabError, ValueError):
    """Invalid argument, configuration value, or file content."""


class ShapeError(ValidationError):
    """Array dimensions do not line up."""


class InstanceTooLargeError(ValidationError):
    """Problem instance exceeds the declared size limit of a solver."""


class InfeasiblePlanError(PromolabError):
    """An allocation plan violates its problem's constraints."""

    def __init__(self, message, customers=None):
        super().__init__(message)
        self.customers = list(customers) if customers is not None else []


class EstimationError(PromolabError):
    """A policy-value estimate cannot be formed from the available RCT data."""


class MetricUndefinedError(PromolabError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class TrainingError(PromolabError):
    """Training aborted (e.g. loss became non-finite)."""
