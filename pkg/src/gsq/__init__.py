"""Featured 2D Gaussian splatting with codebook quantization.

A scene is a set of anisotropic 2D Gaussians, each carrying a D-dimensional
feature vector; rendering sums every unit's weighted deposit over the pixels
inside its cutoff ellipse.  Feature vectors can be snapped to a learnable
codebook, giving a semi-discrete image representation: discrete features,
continuous positions and covariances.
"""

from .codebook import (
    Codebook,
    QuantizationResult,
    UsageStats,
    codebook_gradient,
    nearest,
    quantize_set,
    straight_through,
    update_codebook,
    usage_histogram,
)
from .core import (
    DEFAULT_CUTOFF,
    S_MIN,
    Covariance2D,
    Gaussian2D,
    GaussianSet,
    canonical_angle,
    contribution,
    covariance_from,
    gaussian_weight,
)
from .errors import (
    DegenerateCovarianceError,
    DivergenceError,
    EmptyStatisticsError,
    FileFormatError,
    GsqError,
    InvalidParameterError,
    InvalidSceneError,
    ShapeError,
)
from .fitter import AdamState, FitConfig, FitReport, adam_step, cosine_warmup_lr, fit_image, init_gaussians
from .formats import GsqFile, read_gcb, read_gsq, write_gcb, write_gsq
from .metrics import MetricReport, evaluate, mse, psnr, ssim
from .rasterizer import (
    FeatureMap,
    GradientBundle,
    SplatAux,
    splat_backward,
    splat_dense_reference,
    splat_forward,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Codebook",
    "Covariance2D",
    "DEFAULT_CUTOFF",
    "DegenerateCovarianceError",
    "DivergenceError",
    "EmptyStatisticsError",
    "FeatureMap",
    "FileFormatError",
    "FitConfig",
    "FitReport",
    "Gaussian2D",
    "GaussianSet",
    "GradientBundle",
    "GsqError",
    "GsqFile",
    "InvalidParameterError",
    "InvalidSceneError",
    "MetricReport",
    "QuantizationResult",
    "S_MIN",
    "ShapeError",
    "SplatAux",
    "UsageStats",
    "adam_step",
    "canonical_angle",
    "codebook_gradient",
    "contribution",
    "cosine_warmup_lr",
    "covariance_from",
    "evaluate",
    "fit_image",
    "gaussian_weight",
    "init_gaussians",
    "mse",
    "nearest",
    "psnr",
    "quantize_set",
    "read_gcb",
    "read_gsq",
    "splat_backward",
    "splat_dense_reference",
    "splat_forward",
    "ssim",
    "straight_through",
    "update_codebook",
    "usage_histogram",
    "write_gcb",
    "write_gsq",
]
