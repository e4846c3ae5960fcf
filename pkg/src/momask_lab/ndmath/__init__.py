"""Minimal reverse-mode array core used by every model in the package."""

from .functional import attention, conv1d, cross_entropy, gelu, layernorm, linear, log_softmax, softmax
from .optim import AdamState, adam_step, warmup_lr
from .rng import Rng, SamplingError, sample_categorical, sample_categorical_rows
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    abs_,
    add,
    concat,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    neg,
    pad_time,
    parameter,
    power,
    relu,
    repeat_time,
    record,
    reshape,
    sqrt,
    stop_gradient,
    sub,
    sum_,
    take_last,
    take_rows,
    tanh,
    tensor,
    transpose,
    unfold_time,
)

__all__ = [
    "AdamState",
    "NumericError",
    "Rng",
    "SamplingError",
    "ShapeError",
    "Tape",
    "Tensor",
    "abs_",
    "adam_step",
    "add",
    "attention",
    "concat",
    "conv1d",
    "cross_entropy",
    "div",
    "exp",
    "gelu",
    "getitem",
    "layernorm",
    "linear",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "pad_time",
    "parameter",
    "power",
    "record",
    "relu",
    "repeat_time",
    "reshape",
    "sample_categorical",
    "sample_categorical_rows",
    "softmax",
    "sqrt",
    "stop_gradient",
    "sub",
    "sum_",
    "take_last",
    "take_rows",
    "tanh",
    "tensor",
    "transpose",
    "unfold_time",
    "warmup_lr",
]
