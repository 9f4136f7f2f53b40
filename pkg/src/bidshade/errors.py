"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so keep the classes coarse.
"""


class BidShadeError(Exception):
    pass


class ConfigError(BidShadeError, ValueError):
    """Invalid configuration or auction setup."""


class DataError(BidShadeError):
    """Malformed, empty or incompatible data."""


class FingerprintMismatch(DataError):
    pass


class SchemaError(BidShadeError, ValueError):
    """Model inputs do not match the model schema."""


class DomainError(BidShadeError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class UsageError(BidShadeError, RuntimeError):
    """API called in the wrong order (e.g. backward before forward)."""


class TrainingError(BidShadeError):
    """Training could not proceed (bad labels, divergence)."""


class InfeasibleBudget(BidShadeError):
    def __init__(self, budget, low_cost, high_cost):
        self.budget = budget
        self.achievable = (low_cost, high_cost)
        super().__init__(
            f"budget {budget:.6g} outside achievable expected cost "
            f"[{low_cost:.6g}, {high_cost:.6g}]"
        )


class MetricUndefined(BidShadeError, ValueError):
    pass


class MonotonicityViolation(BidShadeError):
    """Expected cost decreased as mu0 grew during a budget solve."""

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)
