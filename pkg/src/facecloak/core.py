"""Shared types, pixel conventions and seeded randomness.

Images are ``(H, W, 3)`` float64 torch tensors holding RGB values on the
``[0, 255]`` scale. Perturbation budgets use the same units, so ``epsilon=8``
means a maximum per-pixel change of 8/255 of the dynamic range.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
import torch

PIXEL_MAX = 255.0
DTYPE = torch.float64


class FaceCloakError(Exception):
    """Base class for all errors raised by the package."""


class ImageError(FaceCloakError, ValueError):
    pass


class NumericalError(FaceCloakError, ArithmeticError):
    pass


def as_image(data) -> torch.Tensor:
    """Convert an array-like ``(H, W, 3)`` image to a float64 tensor."""
    img = torch.as_tensor(np.asarray(data) if not torch.is_tensor(data) else data, dtype=DTYPE)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"expected an (H, W, 3) image, got shape {tuple(img.shape)}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError(f"image must be at least 1x1, got {tuple(img.shape)}")
    return img


def _first_bad_index(mask: torch.Tensor) -> tuple[int, ...]:
    return tuple(int(i) for i in mask.nonzero()[0])


def check_finite(img: torch.Tensor) -> None:
    bad = ~torch.isfinite(img)
    if bad.any():
        idx = _first_bad_index(bad)
        raise ImageError(f"non-finite pixel value {img[idx].item()} at index {idx}")


def clip_pixels(img) -> torch.Tensor:
    """Saturate to ``[0, 255]``; in-range values pass through untouched."""
    img = img if torch.is_tensor(img) else as_image(img)
    check_finite(img)
    return img.clamp(0.0, PIXEL_MAX)


def quantize_8bit(img) -> torch.Tensor:
    """Round to integral pixel values, halves away from zero.

    Input must already lie in ``[0, 255]``; the result is still float64 so it
    can re-enter the attack or evaluation pipelines directly.
    """
    img = img if torch.is_tensor(img) else as_image(img)
    check_finite(img)
    bad = (img < 0) | (img > PIXEL_MAX)
    if bad.any():
        idx = _first_bad_index(bad)
        raise ImageError(f"pixel value {img[idx].item()} at index {idx} outside [0, 255]")
    # values are non-negative, so floor(v + 0.5) rounds halves away from zero
    return torch.floor(img + 0.5)


def to_uint8(img: torch.Tensor) -> np.ndarray:
    return quantize_8bit(img).detach().cpu().numpy().astype(np.uint8)


@dataclass(frozen=True)
class FaceRegion:
    """Axis-aligned face box in pixel coordinates (``x`` left, ``y`` top)."""

    x: int
    y: int
    w: int
    h: int
    confidence: Optional[float] = None
    backend_id: str = ""

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"face region must have positive size, got w={self.w} h={self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def box(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)

    def clipped(self, height: int, width: int) -> Optional["FaceRegion"]:
        """Intersection with an image of the given size, or None if empty."""
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return replace(self, x=x0, y=y0, w=x1 - x0, h=y1 - y0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FaceRegion":
        return cls(**d)


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters that fully determine one attack run.

    The step size is always derived from ``epsilon`` and ``iterations``.
    ``ensemble_crops + ensemble_resizes`` is the ensemble size; zero for
    both disables the preprocessing ensemble.
    """

    epsilon: float
    iterations: int
    momentum: float = 0.0
    gamma: float = 0.0
    num_targets: int = 0
    ensemble_crops: int = 0
    ensemble_resizes: int = 0
    seed: int = 0
    normalize_momentum: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.momentum < 0 or self.gamma < 0:
            raise ValueError("momentum and gamma must be >= 0")
        if min(self.num_targets, self.ensemble_crops, self.ensemble_resizes) < 0:
            raise ValueError("counts must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    @property
    def ensemble_size(self) -> int:
        return self.ensemble_crops + self.ensemble_resizes

    @property
    def step_size(self) -> float:
        from facecloak.attacks import step_size

        return step_size(self.epsilon, self.iterations)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    Draws come from numpy's PCG64 seeded by ``(seed, sha256(label))``, so the
    same pair always yields the same sequence regardless of platform, worker
    count or the order in which streams are created.
    """

    seed: int
    label: str = ""

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, _label_key(self.label)])))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}" if self.label else label)
