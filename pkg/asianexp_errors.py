"""Exceptions raised by the asianexp library. The CLI maps them to exit codes."""


class ExpansionError(Exception):
    """Base class for every error raised by asianexp."""


class StructureError(ExpansionError, ValueError):
    """Block matrix B or a group operation violates its structural assumptions."""


class JetError(ExpansionError, ValueError):
    """Intrinsic derivative data is malformed or too short for the request."""


class OperatorError(ExpansionError, ValueError):
    pass


class KernelError(ExpansionError, ValueError):
    pass


class NumericalFailure(ExpansionError, RuntimeError):
    """A computation produced non-finite values or failed to converge."""


class ConfigError(ExpansionError, ValueError):
    """Experiment configuration is invalid; `field` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
