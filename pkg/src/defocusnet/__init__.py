"""Per-pixel defocus blur classification with coded apertures.

A defocused image is deconvolved once per candidate blur kernel; a 3-D
convolutional network then scores the resulting hypothesis stack and picks
the kernel size and sign at every pixel.
"""
from .deconv import HypothesisStack, build_stack, cg_deblur, wiener_deblur
from .errors import (ConfigError, DataError, DefocusError, FormatError, NumericalError,
                     ShapeError)
from .estimator import BlurKernelClassifier, HypothesisStackBuilder
from .evaluate import MetricsReport, decode, metrics
from .net3d import forward, init_params
from .optics import (ApertureMask, KernelBank, ThinLensConfig, build_kernel_bank,
                     coc_diameter, quantize_coc, render_defocus, sample_mask, synth_scene)

__version__ = "0.1.0"

__all__ = [
    "ApertureMask",
    "BlurKernelClassifier",
    "ConfigError",
    "DataError",
    "DefocusError",
    "FormatError",
    "HypothesisStack",
    "HypothesisStackBuilder",
    "KernelBank",
    "MetricsReport",
    "NumericalError",
    "ShapeError",
    "ThinLensConfig",
    "build_kernel_bank",
    "build_stack",
    "cg_deblur",
    "coc_diameter",
    "decode",
    "forward",
    "init_params",
    "metrics",
    "quantize_coc",
    "render_defocus",
    "sample_mask",
    "synth_scene",
    "wiener_deblur",
]
