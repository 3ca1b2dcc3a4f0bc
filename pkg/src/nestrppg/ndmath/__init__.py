"""Numeric substrate: float64 tensors with reverse-mode autodiff, SVD and Adam."""
from .functional import avg_pool2d, batch_norm, conv2d, conv_transpose2d, linear, upsample_linear1d
from .gradcheck import analytic_gradient, grad_check, numeric_gradient
from .linalg import (SvdResult, cosine_matrix, cosine_rows, cosine_similarity, norm,
                     singular_values, svd)
from .optim import AdamState, adam_step
from .tensor import (Tensor, as_tensor, clamp, concat, exp, is_grad_enabled, log, logsumexp,
                     matmul, mean, no_grad, relu, reshape, sqrt, stack, tabs, tensor, tmax, tmin,
                     transpose, tsum, where)

__all__ = [
    "Tensor", "tensor", "as_tensor", "no_grad", "is_grad_enabled",
    "clamp", "concat", "exp", "log", "logsumexp", "matmul", "mean", "relu", "reshape",
    "sqrt", "stack", "tabs", "tmax", "tmin", "transpose", "tsum", "where",
    "conv2d", "conv_transpose2d", "batch_norm", "avg_pool2d", "linear", "upsample_linear1d",
    "SvdResult", "svd", "singular_values", "cosine_similarity", "cosine_rows", "cosine_matrix", "norm",
    "AdamState", "adam_step",
    "grad_check", "numeric_gradient", "analytic_gradient",
]
