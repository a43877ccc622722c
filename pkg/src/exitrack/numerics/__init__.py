"""Dense tensors, reverse-mode differentiation, layers, optimiser and I/O."""
from . import checkpoint, nn
from .gradcheck import check_gradients, relative_error
from .optim import AdamW
from .random import child_seed, make_rng
from .tensor import (
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    broadcast_to,
    clip,
    concat,
    conv2d,
    div,
    dropout,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    linear,
    log,
    matmul,
    maximum,
    mean,
    minimum,
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
    sum_,
    swap_last,
    take_rows,
    tanh,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
