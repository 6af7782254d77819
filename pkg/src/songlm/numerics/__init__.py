from .checkpoint import (
    BadMagicError,
    CheckpointError,
    TruncatedPayloadError,
    VersionMismatchError,
    load_checkpoint,
    load_tensors,
    save_checkpoint,
    save_tensors,
)
from .optim import AdamState, adam_step, noam_lr
from .params import ParamStore
from .rng import derive_seed, make_rng
from .tensor import GradError, Tensor, grad, no_grad

__all__ = [
    "AdamState",
    "BadMagicError",
    "CheckpointError",
    "GradError",
    "ParamStore",
    "Tensor",
    "TruncatedPayloadError",
    "VersionMismatchError",
    "adam_step",
    "derive_seed",
    "grad",
    "load_checkpoint",
    "load_tensors",
    "make_rng",
    "no_grad",
    "noam_lr",
    "save_checkpoint",
    "save_tensors",
]
