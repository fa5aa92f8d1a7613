"""Minimal autodiff plus the forecaster and critic networks."""
from .layers import Critic, Forecaster, GRUCell, Linear, Module, quantile_loss
from .optim import Adam, AdamState, adam_step, polyak_update
from .tensor import Tensor, concat, gradcheck, stack, tensor, where

__all__ = [
    "Tensor", "tensor", "concat", "stack", "where", "gradcheck", "Module",
    "Linear", "GRUCell", "Forecaster", "Critic", "quantile_loss", "Adam",
    "AdamState", "adam_step", "polyak_update",
]
