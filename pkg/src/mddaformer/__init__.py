"""Hybrid CNN/transformer image restoration on a small numpy autodiff engine."""

from .complexity import FLOP_CONVENTION, count_flops, count_params_symbolic, tally
from .data import DegradeSpec, degrade, make_pairs
from .errors import (CheckpointError, ConfigError, DimensionError, ImageIOError, MddaError,
                     NonFiniteError, ProbeError, TrainingAborted)
from .metrics import psnr, rgb_to_y, ssim
from .network import ModelConfig, build_model, count_params, restore
from .tensor import Tensor, grad_check, no_grad
from .train import OptState, Schedule, train_loop

__version__ = "0.1.0"
