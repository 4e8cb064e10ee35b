"""Certified gradient denoisers built from weight-tied nonnegative networks.

The denoiser is the exact input gradient of a scalar network, so its
Jacobian is symmetric and, under nonnegative weights with the smooth ReLU,
positive semidefinite.  The package trains such networks, audits those
properties numerically, and plugs them into a primal-dual solver for
image restoration.
"""

from .denoiser import denoise, denoiser_jacobian, denoiser_jvp, potential_eval
from .estimator import MoLGradDenoiser
from .exceptions import (
    CapExceededError,
    DomainError,
    FormatError,
    MolgradError,
    NumericalError,
    ShapeError,
    UnsupportedVariantError,
    ValidationError,
)
from .imaging import BlurKernel, Image, add_noise, build_blur_operator, edge_density, psnr, synth_dataset
from .network import ActivationSpec, Layer, Network, init_network, load_network, save_network
from .pnp import LinearOperator, PnPParams, build_subspace, check_step_sizes, pnp_solve, recommended_params
from .restoration import restore
from .training import TrainConfig, clamp_negative_weights, loss_gradient, train
from .verification import estimate_lipschitz, run_suite

__version__ = "0.1.0"

__all__ = [
    "ActivationSpec",
    "BlurKernel",
    "CapExceededError",
    "DomainError",
    "FormatError",
    "Image",
    "Layer",
    "LinearOperator",
    "MoLGradDenoiser",
    "MolgradError",
    "Network",
    "NumericalError",
    "PnPParams",
    "ShapeError",
    "TrainConfig",
    "UnsupportedVariantError",
    "ValidationError",
    "add_noise",
    "build_blur_operator",
    "build_subspace",
    "check_step_sizes",
    "clamp_negative_weights",
    "denoise",
    "denoiser_jacobian",
    "denoiser_jvp",
    "edge_density",
    "estimate_lipschitz",
    "init_network",
    "load_network",
    "loss_gradient",
    "pnp_solve",
    "potential_eval",
    "psnr",
    "recommended_params",
    "restore",
    "run_suite",
    "save_network",
    "synth_dataset",
    "train",
]
