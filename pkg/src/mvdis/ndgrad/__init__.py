"""Minimal numeric backbone: tensors, reverse-mode gradients, Adam."""
from .check import GradCheckReport, gradient_check, numeric_gradient
from .nn import MLP, Linear, Module
from .optim import Adam, AdamState, adam_init, adam_step
from .tensor import (
    DomainError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    floor_at,
    is_recording,
    l2_normalize,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    power,
    primitive,
    relu,
    reshape,
    softmax,
    square,
    sub,
    sum_,
    take,
    tanh,
    transpose,
)
