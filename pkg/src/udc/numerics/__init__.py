"""Dense float64 tensors, reverse-mode autodiff, layers and optimisers."""

from udc.numerics.layers import (
    AttentionParams,
    FeedForward,
    LayerNorm,
    Linear,
    MLP,
    Module,
    TransformerBlock,
    mean_std,
    mlp_forward,
    multi_head_attention,
)
from udc.numerics.optim import SGD, AdamW, adamw_step
from udc.numerics.tensor import (
    Parameter,
    Tensor,
    as_tensor,
    backward,
    check_finite,
    concat,
    matmul,
    no_grad,
    softmax,
    stop_gradient,
    topological_order,
)

__all__ = [
    "AdamW", "AttentionParams", "FeedForward", "LayerNorm", "Linear", "MLP", "Module",
    "Parameter", "SGD", "Tensor", "TransformerBlock", "adamw_step", "as_tensor", "backward",
    "check_finite", "concat", "matmul", "mean_std", "mlp_forward", "multi_head_attention",
    "no_grad", "softmax", "stop_gradient", "topological_order",
]
