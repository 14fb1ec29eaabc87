"""Minimal dense tensors with reverse-mode differentiation."""

from . import kernels
from .gradcheck import GradcheckReport, NondeterministicFunction, gradcheck
from .tensor import (
    DomainError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    avgpool,
    backward,
    concat,
    conv2d,
    default_dtype,
    div,
    elementwise,
    exp,
    get_default_dtype,
    getitem,
    grad,
    inverse,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    pad2d,
    reshape,
    set_check_finite,
    set_default_dtype,
    sigmoid,
    silu,
    softmax,
    square,
    stack,
    sub,
    tabs,
    take,
    tanh,
    tensor,
    transpose,
    tsum,
    upsample_nearest,
    zero_grads,
)
