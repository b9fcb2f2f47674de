"""Exception hierarchy shared by every fairload module."""


class FairloadError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""


class ParameterError(FairloadError, ValueError):
    """Invalid argument or configuration value."""


class LengthError(ParameterError):
    """Input too short for the requested operation."""


class DataError(FairloadError, ValueError):
    """Malformed, inconsistent or non-finite data."""


class ShapeError(DataError):
    """Array shape does not match the model or operation."""


class ContractError(FairloadError, RuntimeError):
    """Operation is not defined for the current mode."""


class NumericError(FairloadError, ArithmeticError):
    """Non-finite value produced during computation."""
