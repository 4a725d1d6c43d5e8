"""Facial-privacy adversarial attacks and a preprocessing-transfer benchmark."""

from facecloak.core import AttackConfig, FaceCloakError, FaceRegion, ImageError, NumericalError, RngStream
from facecloak.preprocess import PreprocessSpec
from facecloak.resample import InterpolationMethod

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "FaceCloakError",
    "FaceRegion",
    "ImageError",
    "InterpolationMethod",
    "NumericalError",
    "PreprocessSpec",
    "RngStream",
]
