from .engine import (
    LOG_EXCLUDED,
    ComputationTape,
    Tensor,
    absolute,
    add,
    concat,
    cross_entropy,
    custom_op,
    default_dtype,
    embed,
    exp,
    gather_rows,
    gelu,
    grad_enabled,
    kl_categorical,
    l1_loss,
    l2_loss,
    layer_norm,
    log,
    log_softmax,
    matmul,
    maximum_const,
    mean_,
    mul,
    no_grad,
    ones,
    precision,
    randn,
    reciprocal,
    reshape,
    rope,
    scale,
    scatter_rows,
    set_default_dtype,
    slice_cols,
    softmax_masked,
    sqrt,
    square,
    stop_gradient,
    sub,
    sum_,
    tanh,
    tensor,
    transpose2d,
    zeros,
)
from .checkpoint import load_arrays, save_arrays
from .gradcheck import finite_difference_check, finite_difference_check_params
from .optim import Adam

__all__ = [
    "LOG_EXCLUDED",
    "Adam",
    "ComputationTape",
    "Tensor",
    "absolute",
    "add",
    "concat",
    "cross_entropy",
    "custom_op",
    "default_dtype",
    "embed",
    "exp",
    "finite_difference_check",
    "finite_difference_check_params",
    "gather_rows",
    "gelu",
    "grad_enabled",
    "kl_categorical",
    "l1_loss",
    "l2_loss",
    "layer_norm",
    "load_arrays",
    "log",
    "log_softmax",
    "matmul",
    "maximum_const",
    "mean_",
    "mul",
    "no_grad",
    "ones",
    "precision",
    "randn",
    "reciprocal",
    "reshape",
    "rope",
    "save_arrays",
    "scale",
    "scatter_rows",
    "set_default_dtype",
    "slice_cols",
    "softmax_masked",
    "sqrt",
    "square",
    "stop_gradient",
    "sub",
    "sum_",
    "tanh",
    "tensor",
    "transpose2d",
    "zeros",
]
