"""Single-image blind deconvolution with a variational deep image prior.

Two randomly initialized generators (an encoder-decoder for the image, a
fully connected net for the kernel) are optimized on one blurred image by
maximizing a variational lower bound that combines a Monte Carlo data term,
closed-form Gaussian KL/entropy terms, and adaptively weighted sparse or
extreme-channel image priors.
"""

from .elbo import ElboBreakdown, LossMode, data_term, image_entropy_term, kernel_kl_term, loss, prior_terms
from .errors import NonFiniteLossError, NumericError, ParameterError, ShapeError
from .fields import (
    BlurredObservation,
    KernelBelief,
    NoiseInputs,
    SharpImageBelief,
    convolve_valid,
    degrade,
    sample_image,
)
from .generators import (
    ImageGenerator,
    ImageGeneratorSpec,
    KernelGenerator,
    KernelGeneratorSpec,
    init_image_generator,
    init_kernel_generator,
    load_checkpoint,
    save_checkpoint,
)
from .imaging import (
    EvalRecord,
    aligned_image_metrics,
    best_alignment,
    kernel_recovery_error,
    linear_motion_kernel,
    load_image,
    load_kernel,
    psnr,
    random_walk_kernel,
    save_image,
    save_kernel,
    shifted_overlap,
    ssim,
    synthetic_sharp_image,
)
from .priors import (
    PenaltyWeights,
    PriorFamily,
    PriorKind,
    complement_squared_moments,
    extreme_channel_samples,
    penalty,
    penalty_deriv,
    prior_weights,
    sparse_second_moments,
    squared_moments,
    weight_expectation,
)
from .solver import ABLATION_MODES, RunConfig, RunResult, StepRecord, ablation_suite, run

__version__ = "0.1.0"

__all__ = [
    "ABLATION_MODES",
    "BlurredObservation",
    "ElboBreakdown",
    "EvalRecord",
    "ImageGenerator",
    "ImageGeneratorSpec",
    "KernelBelief",
    "KernelGenerator",
    "KernelGeneratorSpec",
    "LossMode",
    "NoiseInputs",
    "NonFiniteLossError",
    "NumericError",
    "ParameterError",
    "PenaltyWeights",
    "PriorFamily",
    "PriorKind",
    "RunConfig",
    "RunResult",
    "ShapeError",
    "SharpImageBelief",
    "StepRecord",
    "ablation_suite",
    "aligned_image_metrics",
    "best_alignment",
    "complement_squared_moments",
    "convolve_valid",
    "data_term",
    "degrade",
    "extreme_channel_samples",
    "image_entropy_term",
    "init_image_generator",
    "init_kernel_generator",
    "kernel_kl_term",
    "kernel_recovery_error",
    "linear_motion_kernel",
    "load_checkpoint",
    "load_image",
    "load_kernel",
    "loss",
    "penalty",
    "penalty_deriv",
    "prior_terms",
    "prior_weights",
    "psnr",
    "random_walk_kernel",
    "run",
    "sample_image",
    "save_checkpoint",
    "save_image",
    "save_kernel",
    "shifted_overlap",
    "sparse_second_moments",
    "squared_moments",
    "ssim",
    "synthetic_sharp_image",
    "weight_expectation",
]
