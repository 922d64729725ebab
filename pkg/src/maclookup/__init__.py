"""Underwater image enhancement: an implicit neural 3D LUT followed by multi-stage gated-MLP refinement.

Everything runs on a small reverse-mode autodiff engine over numpy arrays.
"""

from .runtime import tune_allocator

tune_allocator()

from .autograd import Tape, Tensor, backward, precision, set_precision
from .losses import LossConfig, psnr, ssim
from .lut import LutConfig, LutNetwork, export_cube, fit_lut, lut_forward
from .maae import MaaeConfig, MacLookup, ModelConfig, enhance_array, model_forward
from .train import TrainConfig, train_run

__version__ = "0.1.0"
