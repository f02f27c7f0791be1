"""Desk-scale chest X-ray vision-language model built on a from-scratch autodiff engine."""

from .config import PAPER_SHAPE, TOY, ModelConfig, RunConfig, load_config
from .params import count_parameters, init_params
from .tensor import Tape, Tensor, backward

__all__ = ["ModelConfig", "RunConfig", "TOY", "PAPER_SHAPE", "load_config", "Tensor", "Tape",
           "backward", "init_params", "count_parameters"]
__version__ = "0.1.0"
