class RueAuditError(Exception):
    """Base class for errors raised by this package."""


class InputError(RueAuditError, ValueError):
    """Bad user input: shapes, files, configuration values."""


class NumericalError(RueAuditError, ArithmeticError):
    """A numerical procedure failed (divergence, non-PD factorization)."""


class TrainingDivergedError(NumericalError):
    pass
