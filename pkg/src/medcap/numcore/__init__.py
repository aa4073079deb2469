"""Tensor arithmetic, autodiff, optimization and tensor file I/O."""

from .tensor import (
    DEFAULT_DTYPE,
    ContractError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
    where,
    zero_grad,
)
from .optim import Adam, AdamState, LrSchedule, adam_step, clip_global_norm, global_norm, lr_at
from .io import TensorFormatError, decode_tensor, encode_tensor, read_tensor, write_tensor
from .gradcheck import GradCheckResult, check_gradients, numeric_gradient
