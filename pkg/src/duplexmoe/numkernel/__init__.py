from .tensor import (
    GraphError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    debug_nan_enabled,
    set_debug_nan,
)
from .ops import (
    add,
    add_const,
    attention,
    bmm,
    cross_entropy,
    embed,
    matmul,
    mul,
    neg,
    put_rows,
    repeat_groups,
    reshape,
    rmsnorm,
    rmsnorm_kernel,
    rope_apply,
    rope_kernel,
    rope_rows,
    scale,
    silu,
    softmax_kernel,
    softmax_rows,
    take_rows,
    transpose,
)
from .checks import finite_diff_check, zero_grads

__all__ = [
    "GraphError",
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "add_const",
    "attention",
    "bmm",
    "cross_entropy",
    "debug_nan_enabled",
    "embed",
    "finite_diff_check",
    "matmul",
    "mul",
    "neg",
    "put_rows",
    "repeat_groups",
    "reshape",
    "rmsnorm",
    "rmsnorm_kernel",
    "rope_apply",
    "rope_kernel",
    "rope_rows",
    "scale",
    "set_debug_nan",
    "silu",
    "softmax_kernel",
    "softmax_rows",
    "take_rows",
    "transpose",
    "zero_grads",
]
