"""Embedding models, cosine scoring and FAR-calibrated verification."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from facecloak.core import DTYPE, FaceCloakError, RngStream
from facecloak.preprocess import PreprocessSpec


class UnknownModel(FaceCloakError, KeyError):
    pass


class SetupMismatch(FaceCloakError, ValueError):
    pass


class EmbeddingModel(Protocol):
    model_id: str
    input_size: tuple[int, int]

    def embed(self, face: torch.Tensor) -> torch.Tensor: ...


def value_and_input_gradient(loss_fn: Callable[[torch.Tensor], torch.Tensor], image: torch.Tensor):
    """Evaluate a scalar loss of an image and its gradient w.r.t. the image."""
    x = image.detach().clone().requires_grad_(True)
    value = loss_fn(x)
    (grad,) = torch.autograd.grad(value, x)
    return value.detach(), grad


class ToyEmbeddingModel:
    """Seeded differentiable stand-in for a face embedding network.

    ``embed(v) = tanh(W v + b)``. Each row of ``W`` is a band-pass random
    field, the difference of two Gaussian-smoothed copies of one white-noise
    draw at scales ``band``, rescaled to L2 norm ``gain``. Like a
    convolutional network, it ignores flat regions and the finest pixel
    detail and responds to mid-scale structure. A good part of its
    behaviour therefore survives a change of interpolation but not a crop
    shift of a few pixels.
    """

    def __init__(
        self,
        seed: int = 0,
        input_size=(16, 16),
        dim: int = 32,
        band=(1.5, 4.0),
        gain: float = 6.0,
        bias: float = 0.05,
    ):
        self.seed = seed
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.dim = dim
        self.model_id = "toy" if seed == 0 else f"toy:{seed}"
        gen = RngStream(seed, "toy-model").generator()
        h, w = self.input_size
        noise = gen.standard_normal((dim, h, w, 3))
        fine, coarse = band
        fields = gaussian_filter(noise, sigma=(0, fine, fine, 0), mode="reflect")
        if coarse:
            fields = fields - gaussian_filter(noise, sigma=(0, coarse, coarse, 0), mode="reflect")
        fields = fields.reshape(dim, -1)
        fields *= gain / np.linalg.norm(fields, axis=1, keepdims=True)
        self.weight = torch.tensor(fields, dtype=DTYPE)
        self.bias = torch.tensor(gen.normal(0.0, bias, dim), dtype=DTYPE)

    def embed(self, face: torch.Tensor) -> torch.Tensor:
        if tuple(face.shape[:2]) != self.input_size:
            raise ValueError(f"{self.model_id} expects {self.input_size} input, got {tuple(face.shape[:2])}")
        return torch.tanh(self.weight @ face.reshape(-1) + self.bias)

    def value_and_input_gradient(self, loss_fn, image):
        return value_and_input_gradient(loss_fn, image)


_MODELS: dict[str, Callable[..., EmbeddingModel]] = {
    "toy": lambda arg=None: ToyEmbeddingModel(seed=int(arg) if arg else 0),
}
RESERVED_MODELS = ("arcface",)


def register_model(model_id: str, factory: Callable[..., EmbeddingModel]) -> None:
    _MODELS[model_id] = factory


def get_model(model_id: str) -> EmbeddingModel:
    """Instantiate a registered model; ``"name:arg"`` passes ``arg`` to its factory."""
    name, _, arg = model_id.partition(":")
    if name not in _MODELS:
        from facecloak.detectors import load_plugins

        load_plugins()
    if name not in _MODELS:
        raise UnknownModel(f"no embedding model registered for {model_id!r}")
    return _MODELS[name](arg) if arg else _MODELS[name]()


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable cosine similarity of two 1-D tensors."""
    return (a @ b) / (a.norm() * b.norm())


def cosine_similarity(a, b) -> float:
    a = torch.as_tensor(a, dtype=DTYPE).detach().reshape(-1)
    b = torch.as_tensor(b, dtype=DTYPE).detach().reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.norm() == 0 or b.norm() == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(cosine(a, b).clamp(-1.0, 1.0))


def fr_setup_id(spec: PreprocessSpec, model_id: str) -> str:
    """Identifier of one FR system: detector, interpolation and model."""
    return f"{spec.detector}/{spec.interpolation}/{model_id}"


@dataclass(frozen=True)
class VerificationThreshold:
    value: float
    far_level: float
    fr_setup_id: str = ""

    def check_setup(self, setup_id: Optional[str]) -> None:
        if setup_id is not None and self.fr_setup_id and setup_id != self.fr_setup_id:
            raise SetupMismatch(f"threshold calibrated for {self.fr_setup_id!r} used with {setup_id!r}")


def calibrate_far_threshold(impostor_scores: Iterable[float], far: float, fr_setup_id: str = "") -> VerificationThreshold:
    """Smallest threshold whose false-accept rate on the impostors is <= ``far``.

    Acceptance is ``score >= t``. With ``k = floor(far * n)`` impostors
    allowed through, ``t`` is the next double above the ``(k+1)``-th largest
    score; ties there push the accepted count below ``k``.
    """
    scores = np.sort(np.asarray(list(impostor_scores), dtype=np.float64))[::-1]
    if scores.size == 0:
        raise ValueError("cannot calibrate a threshold from zero impostor scores")
    if not np.all(np.isfinite(scores)):
        raise ValueError("impostor scores must be finite")
    if not 0 <= far < 1:
        raise ValueError(f"far must lie in [0, 1), got {far}")
    k = math.floor(far * scores.size + 1e-9)
    value = float(np.nextafter(scores[k], np.inf))
    return VerificationThreshold(value, far, fr_setup_id)


def false_accept_rate(impostor_scores: Sequence[float], threshold: VerificationThreshold) -> float:
    s = np.asarray(impostor_scores, dtype=np.float64)
    return float(np.count_nonzero(s >= threshold.value)) / s.size


def verify(probe, candidate, threshold: VerificationThreshold, fr_setup_id: Optional[str] = None) -> bool:
    """True iff ``cosine(probe, candidate) >= threshold``."""
    threshold.check_setup(fr_setup_id)
    return cosine_similarity(probe, candidate) >= threshold.value


def impostor_scores(probes: dict, embeddings: dict, identities: dict) -> np.ndarray:
    """Scores for every cross-identity (probe, gallery image) pair.

    ``probes`` maps identity to its probe embedding, ``embeddings`` maps image
    id to embedding and ``identities`` maps image id to identity.
    """
    out = []
    keys = sorted(embeddings)
    for ident in sorted(probes):
        p = probes[ident]
        for image_id in keys:
            if identities[image_id] != ident:
                out.append(cosine_similarity(p, embeddings[image_id]))
    return np.asarray(out)


def save_thresholds(path, thresholds: Iterable[VerificationThreshold]) -> None:
    """Merge thresholds into a JSON file keyed by ``(fr_setup_id, far_level)``.

    Writes go to a temporary file renamed into place, so a failure never
    leaves a partial file.
    """
    path = Path(path)
    table = dict(load_thresholds(path)) if path.exists() else {}
    for t in thresholds:
        table[(t.fr_setup_id, t.far_level)] = t
    doc = {"thresholds": [asdict(table[k]) for k in sorted(table)]}
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".thresholds-")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_thresholds(path) -> dict[tuple[str, float], VerificationThreshold]:
    with open(path) as fh:
        doc = json.load(fh)
    return {(d["fr_setup_id"], d["far_level"]): VerificationThreshold(**d) for d in doc["thresholds"]}
