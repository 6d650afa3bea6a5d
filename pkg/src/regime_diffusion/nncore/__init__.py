"""Minimal float64 tensor, reverse-mode differentiation, layers, and Adam."""

from . import functional
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import directional_check
from .layers import GROUPS, ParamStore
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ContractViolation,
    NumericFailure,
    Tape,
    Tensor,
    as_tensor,
    forward_backward,
    parameter,
)

__all__ = [
    "functional",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "directional_check",
    "GROUPS",
    "ParamStore",
    "Adam",
    "AdamState",
    "adam_step",
    "ContractViolation",
    "NumericFailure",
    "Tape",
    "Tensor",
    "as_tensor",
    "forward_backward",
    "parameter",
]
