"""Histogram transformer for adverse-weather image restoration, on a hand-written autodiff core."""

from .autograd import Tape, Tensor, backward, grad_check, no_grad, precision
from .errors import (ConfigError, DimensionError, HistoformerError, NumericError, ParseError,
                     PermutationError, StateError)
from .model import ModelConfig, ParameterStore, init_store, model_forward, param_count

__all__ = [
    "Tape", "Tensor", "backward", "grad_check", "no_grad", "precision",
    "ConfigError", "DimensionError", "HistoformerError", "NumericError", "ParseError",
    "PermutationError", "StateError",
    "ModelConfig", "ParameterStore", "init_store", "model_forward", "param_count",
]
