"""Dual-path stable soft prompt generation for domain generalization,
reproduced at desk scale on a frozen synthetic vision-language encoder."""

from .errors import (
    ContaminationError,
    DPSPGError,
    InvalidInput,
    InvalidParameter,
    InvalidShape,
    InvalidState,
    NumericFailure,
    StageOrderError,
    TrainingFailure,
    ValidationError,
)

__version__ = "0.1.0"
