"""Dense matrix ops with reverse-mode gradients, Adam, and a gradient checker."""

from .autodiff import (
    DTYPES,
    Parameter,
    Tensor,
    add,
    affine,
    as_matrix,
    backward,
    concat_cols,
    constant,
    matmul,
    mix_rows,
    relu,
    reshape,
    resolve_dtype,
    scale,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    total,
)
from .gradcheck import GradCheckReport, finite_diff_check, relative_error
from .optim import AdamState, adam_step, glorot_uniform

__all__ = [
    "DTYPES",
    "AdamState",
    "GradCheckReport",
    "Parameter",
    "Tensor",
    "adam_step",
    "add",
    "affine",
    "as_matrix",
    "backward",
    "concat_cols",
    "constant",
    "finite_diff_check",
    "glorot_uniform",
    "matmul",
    "mix_rows",
    "relative_error",
    "relu",
    "reshape",
    "resolve_dtype",
    "scale",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "total",
]
