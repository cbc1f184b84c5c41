"""Coded-aperture stereo: phase-mask optics, scene rendering, matching and EDOF recovery."""

from .errors import (CodedStereoError, ConfigurationError, DataError, DomainError, NumericalError,
                     ParseError, UsageError)
from .optics import OpticalConfig, PhaseMask, PSFStack, compute_psf, compute_psf_stack
from .recon import LossWeights, edof_reconstruct
from .render import Scene, render_stereo_pair
from .stereo import match_stereo

__version__ = "0.1.0"

__all__ = [
    "CodedStereoError", "ConfigurationError", "DataError", "DomainError", "NumericalError", "ParseError",
    "UsageError", "OpticalConfig", "PhaseMask", "PSFStack", "compute_psf", "compute_psf_stack",
    "LossWeights", "edof_reconstruct", "Scene", "render_stereo_pair", "match_stereo", "__version__",
]
