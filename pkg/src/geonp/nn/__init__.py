"""Minimal reverse-mode autodiff on numpy arrays."""

from .checkpoint import load_params, read_params, save_params
from .functional import (
    PRIMITIVE_KINDS,
    adaptive_avg_pool,
    apply_primitive,
    batch_norm2d,
    conv2d_3x3,
    dropout,
    gaussian_nll,
    kl_diag_gaussians,
    layer_norm,
    linear,
    mean_pool,
    multihead_cross_attention,
    reparameterize,
    softmax,
)
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .optim import OptimizerState, adamw_step, clip_global_norm
from .params import ParamStore
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_rows,
    clamp,
    concatenate,
    default_dtype,
    exp,
    get_default_dtype,
    matmul,
    mul,
    no_grad,
    record_kinks,
    relu,
    reshape,
    set_default_dtype,
    square,
    sub,
    transpose,
)
