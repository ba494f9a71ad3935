"""Exception types shared across the package.

Each maps to a CLI exit code (see cli.EXIT_CODES) so batch runs can
signal the failure category to calling scripts.
"""


class FairdiffError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(FairdiffError):
    """Invalid configuration: bad schedule parameters, mismatched
    coefficients, unsupported sampler combination, empty reference set."""


class BudgetExceededError(FairdiffError):
    """A guarded computation would exceed its configured budget
    (exact OT enumeration, naive unrolled differentiation)."""


class TrainingFailedError(FairdiffError):
    """Training produced a non-finite loss or missed a required metric.

    ``last_checkpoint`` holds the last state observed before failure
    (a state-dict-like mapping), or None if nothing finite was seen.
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
