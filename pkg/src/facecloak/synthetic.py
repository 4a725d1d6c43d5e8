"""Seeded synthetic face galleries for desk-scale experiments.

Each identity is a bright ellipse with its own skin tone and smooth facial
texture, set on a darker background. Images of one identity differ by a
pixel of jitter, a brightness change, fresh background and a little smooth
noise. The toy embedding model therefore scores genuine pairs well above
impostors, and the ``blob`` detector finds the face.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from facecloak.core import RngStream


def _smooth_noise(gen: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = gaussian_filter(gen.standard_normal(shape), sigma=(sigma, sigma, 0), mode="reflect")
    return f / (f.std() + 1e-12)


def make_faces(
    n_identities: int,
    per_identity: int,
    size: int = 16,
    seed: int = 0,
    texture_sigma: float = 1.5,
    texture_amp: float = 5.0,
    edge_blur: float = 2.0,
    background_amp: float = 5.0,
) -> dict[str, tuple[str, np.ndarray]]:
    """Map ``image_id`` to ``(identity, uint8 HxWx3 image)``."""
    root = RngStream(seed, "synthetic-faces")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    out = {}
    for i in range(n_identities):
        ident = f"id{i:03d}"
        gen = root.child(ident).generator()
        tone = np.array([190.0, 150.0, 120.0]) + gen.normal(0, 20, 3)
        texture = texture_amp * _smooth_noise(gen, (size, size, 3), texture_sigma)
        ax, ay = size * gen.uniform(0.30, 0.36), size * gen.uniform(0.38, 0.44)
        for j in range(per_identity):
            g = root.child(f"{ident}/{j}").generator()
            dx, dy = g.integers(-1, 2, size=2)
            cx, cy = size / 2 + dx, size / 2 + dy
            mask = (((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0).astype(np.float64)
            mask = gaussian_filter(mask, edge_blur)[..., None]
            face = tone * g.uniform(0.92, 1.08) + np.roll(texture, (dy, dx), axis=(0, 1))
            face = face + 8.0 * _smooth_noise(g, (size, size, 3), 1.0)
            background = 60.0 + background_amp * _smooth_noise(g, (size, size, 3), 2.0)
            img = mask * face + (1.0 - mask) * background
            out[f"{ident}_{j:02d}"] = (ident, np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))
    return out
