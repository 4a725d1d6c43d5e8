"""The face preprocessing function and its randomised variants.

A pipeline is crop, then an optional rescale, then a resize to the model
input, then affine normalisation ``(v - offset) / scale``. Face detection is
not differentiable. It runs once on the clean image and the resulting
region is passed in explicitly, so every attack iterate sees the same crop.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from facecloak.core import FaceRegion, ImageError
from facecloak.detectors import detect_primary_face
from facecloak.resample import METHODS, InterpolationMethod, resize

__all__ = [
    "PreprocessSpec",
    "Variant",
    "VariantSampler",
    "PoolExhausted",
    "crop",
    "resize",
    "normalize",
    "preprocess",
    "gaussian_kernel",
    "gaussian_smooth",
    "bind",
]

SCALE_RANGE = (0.5, 2.0)


class PoolExhausted(ImageError):
    pass


@dataclass(frozen=True)
class PreprocessSpec:
    detector: str
    interpolation: InterpolationMethod = InterpolationMethod("area")
    output_size: tuple[int, int] = (16, 16)
    scale: float = 128.0
    offset: float = 127.5
    prescale: float = 1.0

    def __post_init__(self):
        if isinstance(self.interpolation, str):
            object.__setattr__(self, "interpolation", InterpolationMethod.parse(self.interpolation))
        object.__setattr__(self, "output_size", (int(self.output_size[0]), int(self.output_size[1])))
        if min(self.output_size) < 1:
            raise ValueError(f"output size must be positive, got {self.output_size}")
        if self.scale == 0:
            raise ValueError("normalisation scale must be non-zero")
        if self.prescale <= 0:
            raise ValueError("prescale must be positive")

    @property
    def label(self) -> str:
        return f"{self.detector}/{self.interpolation}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interpolation"] = str(self.interpolation)
        d["output_size"] = list(self.output_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessSpec":
        d = dict(d)
        d["output_size"] = tuple(d["output_size"])
        return cls(**d)


@dataclass(frozen=True)
class Variant:
    """A preprocessing spec bound to the face region it crops."""

    spec: PreprocessSpec
    region: FaceRegion


def bind(img: torch.Tensor, spec: PreprocessSpec) -> Variant:
    return Variant(spec, detect_primary_face(img, spec.detector))


def crop(img: torch.Tensor, region: FaceRegion) -> torch.Tensor:
    """Window ``img`` to ``region`` clipped to the image bounds."""
    r = region.clipped(int(img.shape[0]), int(img.shape[1]))
    if r is None:
        raise ImageError(f"region {region.box} does not intersect image of size {tuple(img.shape[:2])}")
    return img[r.y : r.y + r.h, r.x : r.x + r.w]


def normalize(img: torch.Tensor, scale: float = 128.0, offset: float = 127.5) -> torch.Tensor:
    return (img - offset) / scale


def preprocess(img: torch.Tensor, spec: PreprocessSpec, region: FaceRegion) -> torch.Tensor:
    """Apply the full pipeline, returning a normalised ``spec.output_size`` tensor."""
    face = crop(img, region)
    if spec.prescale != 1.0:
        h, w = face.shape[0], face.shape[1]
        size = (max(1, math.floor(h * spec.prescale + 0.5)), max(1, math.floor(w * spec.prescale + 0.5)))
        face = resize(face, size, spec.interpolation)
    face = resize(face, spec.output_size, spec.interpolation)
    return normalize(face, spec.scale, spec.offset)


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D kernel is their outer product."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    k = np.exp(-(np.arange(-r, r + 1, dtype=np.float64) ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _reflect_index(n: int, pad: int) -> torch.Tensor:
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return torch.zeros(len(idx), dtype=torch.long)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - idx, idx)
    return torch.from_numpy(idx)


def gaussian_smooth(img: torch.Tensor, kernel_size: int = 7, sigma: float = 3.0) -> torch.Tensor:
    """Per-channel separable Gaussian blur with reflect padding."""
    k = torch.from_numpy(gaussian_kernel(kernel_size, sigma)).to(img.dtype)
    r = kernel_size // 2
    if r == 0:
        return img
    h, w = img.shape[0], img.shape[1]
    padded = img.index_select(0, _reflect_index(h, r))
    # windows along H: (H, W, C, K)
    out = padded.unfold(0, kernel_size, 1) @ k
    padded = out.index_select(1, _reflect_index(w, r))
    return padded.unfold(1, kernel_size, 1) @ k


class VariantSampler:
    """Draws randomised preprocessing variants around a base spec.

    Crop variants swap in a detector taken without replacement from
    ``pool``. Resize variants rescale the cropped face by a factor drawn
    uniformly from ``[0.5, 2.0]`` and pick one of the four interpolation
    methods uniformly for both the rescale and the final resize.
    """

    def __init__(self, base: PreprocessSpec, pool: Sequence[str], rng: np.random.Generator):
        if not pool:
            raise ValueError("detector pool must be non-empty")
        self.base = base
        self.pool = list(pool)
        self.rng = rng
        self._remaining: Optional[list[str]] = None
        self.reset()

    def reset(self) -> None:
        order = self.rng.permutation(len(self.pool))
        self._remaining = [self.pool[i] for i in order]

    def crop_variant(self) -> PreprocessSpec:
        if not self._remaining:
            raise PoolExhausted(f"all {len(self.pool)} detectors in the pool were already drawn")
        return replace(self.base, detector=self._remaining.pop(0))

    def resize_variant(self) -> PreprocessSpec:
        u = float(self.rng.uniform(*SCALE_RANGE))
        method = METHODS[int(self.rng.integers(len(METHODS)))]
        return replace(
            self.base,
            prescale=u,
            interpolation=InterpolationMethod(method, self.base.interpolation.antialias),
        )
