"""Minimal float64 tensor core with reverse-mode differentiation."""

from .gradcheck import check_op, finite_diff_check, numerical_gradient, relative_error
from .params import ParamStore, adam_step, load_params, read_arrays, save_params, write_arrays
from .tensor import (
    OPS,
    ContractError,
    DimensionError,
    DomainError,
    Gradients,
    Tape,
    Tensor,
    abs_,
    add,
    apply,
    as_tensor,
    backward,
    concat,
    detach,
    elementwise,
    exp,
    gradient,
    layernorm,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    reduce,
    relu,
    set_debug,
    sigmoid,
    slice_cols,
    softmax_rows,
    sub,
)
