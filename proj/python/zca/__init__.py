"""Python access to the zero cross-attention try-on library."""

from ._zca import (
    Model,
    Sample,
    Schedule,
    atv_loss,
    atv_loss_grad,
    center_coordinate_map,
    config_keys,
    config_text,
    decode,
    encode,
    finetune_atv,
    generate_sample,
    grad_check,
    strided_timesteps,
    train,
)

__all__ = [
    "Model",
    "Sample",
    "Schedule",
    "atv_loss",
    "atv_loss_grad",
    "center_coordinate_map",
    "config_keys",
    "config_text",
    "decode",
    "encode",
    "finetune_atv",
    "generate_sample",
    "grad_check",
    "strided_timesteps",
    "train",
]
