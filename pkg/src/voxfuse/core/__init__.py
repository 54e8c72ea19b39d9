from voxfuse.core.functional import (
    cross_entropy,
    l1,
    l2_norm,
    l2_normalize,
    log_softmax,
    lovasz_grad,
    lovasz_softmax,
    mse,
    relu,
    sigmoid,
    softmax,
    softplus,
)
from voxfuse.core.gradcheck import check_gradients, numerical_grad, relative_error
from voxfuse.core.nn import Conv3d, Linear, Module, Pointwise3d
from voxfuse.core.optim import AdamState, AdamW, adam_step, cosine_lr
from voxfuse.core.tensor import (
    Tensor,
    as_tensor,
    concat,
    matmul,
    pad,
    scatter_add,
    stack,
    take,
    tensor,
)

__all__ = [
    "AdamState",
    "AdamW",
    "Conv3d",
    "Linear",
    "Module",
    "Pointwise3d",
    "Tensor",
    "adam_step",
    "as_tensor",
    "check_gradients",
    "concat",
    "cosine_lr",
    "cross_entropy",
    "l1",
    "l2_norm",
    "l2_normalize",
    "log_softmax",
    "lovasz_grad",
    "lovasz_softmax",
    "matmul",
    "mse",
    "numerical_grad",
    "pad",
    "relative_error",
    "relu",
    "scatter_add",
    "sigmoid",
    "softmax",
    "softplus",
    "stack",
    "take",
    "tensor",
]
