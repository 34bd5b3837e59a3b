"""Exception hierarchy shared by every stage.

Each class carries the CLI exit code it maps to.
"""


class DPSPGError(Exception):
    exit_code = 1


class InvalidParameter(DPSPGError, ValueError):
    exit_code = 2


class InvalidShape(DPSPGError, ValueError):
    exit_code = 2


class InvalidInput(DPSPGError, ValueError):
    exit_code = 2


class ValidationError(DPSPGError, ValueError):
    """Bad config field; ``field`` names the offending key."""

    exit_code = 2

    def __init__(self, message, field=None):
        super().__init__(message if field is None or message.startswith(field) else f"{field}: {message}")
        self.field = field


class InvalidState(DPSPGError, RuntimeError):
    exit_code = 3


class StageOrderError(DPSPGError, RuntimeError):
    exit_code = 3

    def __init__(self, message, missing=None):
        super().__init__(message if missing is None else f"{message}: missing {missing}")
        self.missing = missing


class NumericFailure(DPSPGError, ArithmeticError):
    exit_code = 4


class TrainingFailure(NumericFailure):
    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ContaminationError(DPSPGError, RuntimeError):
    exit_code = 5
