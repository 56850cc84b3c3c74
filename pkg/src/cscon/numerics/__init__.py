"""Minimal dense-tensor engine: tape autodiff, params, checkpoints."""

import numpy as np

from . import ops
from .gradcheck import GradCheckReport, grad_check, relative_error
from .params import (
    ArchiveError,
    ParamStore,
    fan_in_uniform,
    load_archive,
    save_archive,
    trunc_normal,
)
from .tensor import ShapeError, Tensor, as_tensor, is_grad_enabled, no_grad


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


__all__ = [
    "ArchiveError",
    "GradCheckReport",
    "ParamStore",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "fan_in_uniform",
    "grad_check",
    "is_grad_enabled",
    "load_archive",
    "make_rng",
    "no_grad",
    "ops",
    "relative_error",
    "save_archive",
    "trunc_normal",
]
