"""From-scratch network substrate: 3x3 convolutions, ReLU, losses, Adam, gradient checks."""

from .adam import AdamState, TrainingDivergenceError, adam_step
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .layers import (
    ConvBlock,
    ConvLayer,
    conv2d_backward,
    conv2d_forward,
    he_conv,
    relu_backward,
    relu_forward,
)
from .losses import l2_loss, l2_loss_grad, nrmse_loss, nrmse_loss_grad
from .serialize import load_weights, save_weights

__all__ = [
    "AdamState",
    "TrainingDivergenceError",
    "adam_step",
    "check_gradients",
    "numerical_gradient",
    "relative_error",
    "ConvBlock",
    "ConvLayer",
    "conv2d_backward",
    "conv2d_forward",
    "he_conv",
    "relu_backward",
    "relu_forward",
    "l2_loss",
    "l2_loss_grad",
    "nrmse_loss",
    "nrmse_loss_grad",
    "load_weights",
    "save_weights",
]
