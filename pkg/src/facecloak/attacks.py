"""L-infinity bounded signed-gradient attacks on face embeddings.

All three attacks share one loop:

    g <- mu * g + grad J(x')
    x' <- clip(x' - alpha * sign(g)),   alpha = 1.5 * eps / T

``J`` is the objective being *minimised*: the cosine similarity for MIM,
the target-minus-source distance for TIP-IM and the negated feature
distance for LowKey, which climbs its distance terms. Setting ``mu = 0``
gives plain iterative FGSM. Each loss can also be averaged over several
preprocessing variants, which are redrawn every iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from facecloak.core import AttackConfig, NumericalError, PIXEL_MAX, RngStream
from facecloak.detectors import NoFaceFound, detect_primary_face
from facecloak.embedding import EmbeddingModel, cosine, value_and_input_gradient
from facecloak.preprocess import PreprocessSpec, Variant, VariantSampler, gaussian_smooth, preprocess

log = logging.getLogger(__name__)

ATTACKS = ("lowkey", "mim", "tipim")

# per-attack defaults: eps, T, mu, gamma
DEFAULTS = {
    "mim": dict(epsilon=8.0, iterations=100, momentum=1.0, gamma=0.0),
    "lowkey": dict(epsilon=8.0, iterations=50, momentum=0.0, gamma=0.05),
    "tipim": dict(epsilon=12.0, iterations=50, momentum=1.0, gamma=0.0, num_targets=10),
}


def step_size(epsilon: float, iterations: int) -> float:
    if iterations <= 0 or epsilon <= 0:
        raise ValueError("step size needs epsilon > 0 and iterations > 0")
    return 1.5 * epsilon / iterations


def project_linf(adv: torch.Tensor, orig: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp into the epsilon box around ``orig``, then into the pixel range."""
    if adv.shape != orig.shape:
        raise ValueError(f"shape mismatch: {tuple(adv.shape)} vs {tuple(orig.shape)}")
    out = torch.minimum(torch.maximum(adv, orig - epsilon), orig + epsilon)
    # orig + eps can round so that (out - orig) exceeds eps by an ulp; step those back
    over = (out - orig).abs() > epsilon
    while over.any():
        out = torch.where(over, torch.nextafter(out, orig), out)
        over = (out - orig).abs() > epsilon
    return out.clamp(0.0, PIXEL_MAX)


def pixel_mse(x: torch.Tensor, x_adv: torch.Tensor) -> torch.Tensor:
    """Stand-in perceptual distance: ``100 * mean(((x - x') / 255)^2)``.

    The factor puts an eps=8 perturbation at about 0.1, which is the usual
    range of a learned perceptual metric.
    """
    return 100.0 * torch.mean(((x - x_adv) / PIXEL_MAX) ** 2)


def _embed(model: EmbeddingModel, img, spec: PreprocessSpec, region) -> torch.Tensor:
    return model.embed(preprocess(img, spec, region))


def _clean_embedding(model, x, spec, region, clean_emb):
    if clean_emb is not None:
        return clean_emb
    with torch.no_grad():
        return _embed(model, x, spec, region)


def mim_loss(x_adv, x, spec, region, model, clean_emb=None) -> torch.Tensor:
    e0 = _clean_embedding(model, x, spec, region, clean_emb)
    return cosine(e0, _embed(model, x_adv, spec, region))


def lowkey_loss(
    x_adv,
    x,
    spec,
    region,
    model,
    gamma: float = 0.05,
    smoothing: tuple[int, float] = (7, 3.0),
    perceptual: Callable = pixel_mse,
    clean_emb=None,
) -> torch.Tensor:
    e0 = _clean_embedding(model, x, spec, region, clean_emb)
    direct = _embed(model, x_adv, spec, region)
    blurred = _embed(model, gaussian_smooth(x_adv, *smoothing), spec, region)
    dist = ((e0 - direct) ** 2).sum() + ((e0 - blurred) ** 2).sum()
    loss = dist / e0.norm()
    if gamma:
        loss = loss - gamma * perceptual(x, x_adv)
    return loss


def tipim_loss(x_adv, x, target_embeddings: Sequence[torch.Tensor], spec, region, model, clean_emb=None) -> torch.Tensor:
    if len(target_embeddings) == 0:
        raise ValueError("TIP-IM needs at least one target embedding")
    e0 = _clean_embedding(model, x, spec, region, clean_emb)
    e = _embed(model, x_adv, spec, region)
    to_targets = torch.stack([((e - t) ** 2).sum() for t in target_embeddings]).mean()
    return to_targets - ((e - e0) ** 2).sum()


def ensemble_loss(loss_fn: Callable, x_adv, variants: Sequence[Variant]) -> torch.Tensor:
    """Mean of ``loss_fn(x_adv, variant)`` over the preprocessing variants."""
    if not variants:
        raise ValueError("ensemble needs at least one variant")
    if len(variants) == 1:
        return loss_fn(x_adv, variants[0])
    return torch.stack([loss_fn(x_adv, v) for v in variants]).mean()


def affine_warp(img: torch.Tensor, angle_deg: float, tx: float, ty: float) -> torch.Tensor:
    """Rotate about the centre and translate by ``(tx, ty)`` fractions of (W, H).

    Bilinear sampling, reflect fill. The identity transform samples pixel
    centres exactly.
    """
    h, w = img.shape[0], img.shape[1]
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    theta = torch.tensor(
        [[c, -s * h / w, 2.0 * tx], [s * w / h, c, 2.0 * ty]],
        dtype=img.dtype,
    )[None]
    inp = img.permute(2, 0, 1)[None]
    grid = F.affine_grid(theta, list(inp.shape), align_corners=False)
    out = F.grid_sample(inp, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return out[0].permute(1, 2, 0)


def random_augment(
    img: torch.Tensor,
    rng: Optional[np.random.Generator],
    max_rotation: float = 10.0,
    max_translate: float = 0.05,
) -> torch.Tensor:
    """Random rotation and translation; identity when ``rng`` is None."""
    if rng is None:
        return img
    return affine_warp(img, *draw_warp(rng, max_rotation, max_translate))


def draw_warp(rng: np.random.Generator, max_rotation: float = 10.0, max_translate: float = 0.05):
    """Angle in degrees and (tx, ty) translation fractions."""
    angle = float(rng.uniform(-max_rotation, max_rotation))
    tx, ty = (float(v) for v in rng.uniform(-max_translate, max_translate, size=2))
    return angle, tx, ty


@dataclass
class LossSpec:
    """Which objective to optimise and its attack-specific inputs.

    ``gamma=None`` defers the perceptual weight to the attack config.
    """

    kind: str
    target_embeddings: tuple = ()
    gamma: Optional[float] = None
    smoothing: tuple[int, float] = (7, 3.0)
    perceptual: Callable = pixel_mse
    augment: Optional[bool] = None
    max_rotation: float = 10.0
    max_translate: float = 0.05

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACKS}")
        if self.kind == "tipim" and len(self.target_embeddings) == 0:
            raise ValueError("TIP-IM needs target embeddings")
        if self.augment is None:
            self.augment = self.kind == "tipim"


class FixedPipeline:
    """Always the same single preprocessing variant."""

    def __init__(self, variant: Variant):
        self.variant = variant

    def draw(self, rng: np.random.Generator) -> list[Variant]:
        return [self.variant]


class EnsemblePipeline:
    """Fresh crop and resize variants around a base pipeline every iteration.

    Crop variants use detectors drawn without replacement from ``pool``,
    with their regions detected once on the clean image.
    """

    def __init__(self, base: Variant, pool_regions: dict, n_crops: int = 5, n_resizes: int = 4):
        if n_crops + n_resizes < 1:
            raise ValueError("ensemble needs at least one variant")
        if n_crops > 0 and len(pool_regions) < n_crops:
            raise ValueError(f"{n_crops} crop variants requested but only {len(pool_regions)} pool detectors")
        self.base = base
        self.pool_regions = dict(pool_regions)
        self.n_crops = n_crops
        self.n_resizes = n_resizes

    @classmethod
    def from_image(cls, x, base: Variant, pool: Iterable[str], n_crops: int = 5, n_resizes: int = 4):
        regions = {}
        for det in pool:
            try:
                regions[det] = detect_primary_face(x, det)
            except NoFaceFound:
                log.warning("pool detector %s found no face; dropped from the ensemble", det)
        return cls(base, regions, n_crops, n_resizes)

    def draw(self, rng: np.random.Generator) -> list[Variant]:
        out = []
        if self.n_crops:
            sampler = VariantSampler(self.base.spec, sorted(self.pool_regions), rng)
            for _ in range(self.n_crops):
                spec = sampler.crop_variant()
                out.append(Variant(spec, self.pool_regions[spec.detector]))
        if self.n_resizes:
            sampler = VariantSampler(self.base.spec, [self.base.spec.detector], rng)
            out.extend(Variant(sampler.resize_variant(), self.base.region) for _ in range(self.n_resizes))
        return out


def make_objective(x: torch.Tensor, config: AttackConfig, loss: LossSpec, model: EmbeddingModel):
    """``J(x_adv, variant)``, the per-variant objective to minimise."""
    gamma = config.gamma if loss.gamma is None else loss.gamma
    cache: dict = {}

    def clean(variant: Variant):
        if variant not in cache:
            cache[variant] = _clean_embedding(model, x, variant.spec, variant.region, None)
        return cache[variant]

    def objective(x_adv, variant: Variant):
        e0 = clean(variant)
        spec, region = variant.spec, variant.region
        if loss.kind == "mim":
            return mim_loss(x_adv, x, spec, region, model, clean_emb=e0)
        if loss.kind == "tipim":
            return tipim_loss(x_adv, x, loss.target_embeddings, spec, region, model, clean_emb=e0)
        return -lowkey_loss(x_adv, x, spec, region, model, gamma, loss.smoothing, loss.perceptual, clean_emb=e0)

    return objective


StepCallback = Callable[[int, torch.Tensor, float], None]


def run_attack(
    x: torch.Tensor,
    config: AttackConfig,
    loss: LossSpec,
    model: EmbeddingModel,
    pipeline,
    rng: Optional[RngStream] = None,
    callback: Optional[StepCallback] = None,
) -> torch.Tensor:
    """Run ``config.iterations`` projected signed-gradient steps from ``x``.

    ``pipeline`` is a :class:`Variant`, a :class:`FixedPipeline` or an
    :class:`EnsemblePipeline`. All randomness (ensemble draws, TIP-IM
    augmentation) comes from ``rng``, which defaults to a stream derived
    from ``config.seed``. ``callback(t, x_adv, loss)`` sees every projected
    iterate.
    """
    if isinstance(pipeline, Variant):
        pipeline = FixedPipeline(pipeline)
    x = x.detach()
    if config.iterations == 0:
        return x.clone()
    gen = (rng or RngStream(config.seed, "attack")).generator()
    alpha = step_size(config.epsilon, config.iterations)
    objective = make_objective(x, config, loss, model)
    adv = x.clone()
    g = torch.zeros_like(x)
    for t in range(config.iterations):
        variants = pipeline.draw(gen)
        warp = draw_warp(gen, loss.max_rotation, loss.max_translate) if loss.augment else None

        def fn(z, variants=variants, warp=warp):
            if warp is not None:
                z = affine_warp(z, *warp)
            return ensemble_loss(objective, z, variants)

        value, grad = value_and_input_gradient(fn, adv)
        if not torch.isfinite(value) or not torch.isfinite(grad).all():
            raise NumericalError(f"non-finite loss or gradient at iteration {t}")
        if config.normalize_momentum:
            grad = grad / grad.abs().sum().clamp_min(1e-12)
        g = config.momentum * g + grad
        adv = project_linf(adv - alpha * torch.sign(g), x, config.epsilon)
        if callback is not None:
            callback(t, adv, float(value))
    return adv


def iterative_fgsm(x: torch.Tensor, epsilon: float, iterations: int, loss_fn: Callable) -> torch.Tensor:
    """Momentum-free projected signed-gradient descent on ``loss_fn``."""
    x = x.detach()
    if iterations == 0:
        return x.clone()
    alpha = step_size(epsilon, iterations)
    adv = x.clone()
    for _ in range(iterations):
        _, grad = value_and_input_gradient(loss_fn, adv)
        adv = project_linf(adv - alpha * torch.sign(grad), x, epsilon)
    return adv


def prepare_targets(targets: Iterable[tuple[torch.Tensor, object]], spec: PreprocessSpec, model: EmbeddingModel) -> tuple:
    """Embed ``(image, region)`` target pairs once under ``spec``."""
    with torch.no_grad():
        return tuple(_embed(model, img, spec, region) for img, region in targets)
