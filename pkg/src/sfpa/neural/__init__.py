from .graph import (
    LAYER_KINDS,
    LayerSpec,
    ModelGraph,
    Node,
    build_patchgan_discriminator,
    build_residual_unet_generator,
    build_unet_generator,
    hidden_conv_layers,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, no_grad, parameter

__all__ = [
    "LAYER_KINDS",
    "LayerSpec",
    "ModelGraph",
    "Node",
    "build_patchgan_discriminator",
    "build_residual_unet_generator",
    "build_unet_generator",
    "hidden_conv_layers",
    "Adam",
    "AdamState",
    "adam_step",
    "Tensor",
    "no_grad",
    "parameter",
]
