from .tensor import (
    Tensor,
    as_tensor,
    no_grad,
    grad_enabled,
    set_default_dtype,
    get_default_dtype,
    using_dtype,
)
from . import ops, nn
from .optim import AdamW, clip_grad_norm
from .gradcheck import check_gradients, numeric_gradient, max_rel_error

__all__ = [
    "Tensor", "as_tensor", "no_grad", "grad_enabled",
    "set_default_dtype", "get_default_dtype", "using_dtype",
    "ops", "nn", "AdamW", "clip_grad_norm",
    "check_gradients", "numeric_gradient", "max_rel_error",
]
