"""Desk-scale diffusion-training-enhanced image restoration.

A small numpy autodiff core, a DDPM schedule, a timestep-conditioned U-Net
with MoE adapters, synthetic degradations, timestep matching and the
fine-tuning / incremental multi-task training procedures built on them.
"""
from .errors import (CheckpointError, ConfigError, ContractError, CrcMismatch, DTIRError,
                     MalformedContainer, NumericsError, RangeError, ScheduleError, ShapeError,
                     StageError, UnknownKey)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "CrcMismatch", "DTIRError",
    "MalformedContainer", "NumericsError", "RangeError", "ScheduleError", "ShapeError",
    "StageError", "UnknownKey", "__version__",
]
