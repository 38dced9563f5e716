"""Dense float64 tensors, reverse-mode autodiff, Adam, and gradient checks."""

from .gradcheck import GRADCHECK_CASES, GradCheckReport, finite_diff_check, run_gradchecks
from .optim import Adam, adam_step
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    conv1d,
    detach,
    div,
    dropout,
    exp,
    getitem,
    is_grad_enabled,
    l2_normalize,
    layer_norm,
    linear,
    log,
    log_softmax,
    masked_scaled_attention,
    matmul,
    maximum,
    minimum,
    mean,
    mse,
    mul,
    neg,
    no_grad,
    pad_rows,
    power,
    relu,
    reshape,
    scaled_attention,
    sigmoid,
    softmax,
    softplus,
    square,
    sub,
    topk_mean,
    transpose,
    tsum,
)
