"""Gallery-level orchestration: attacking, calibrating and evaluating.

These functions tie the library modules to on-disk galleries and are what
the command-line tool calls. An attack run is described by a plain
dictionary (the run manifest) that holds everything needed to replay it.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from facecloak.attacks import ATTACKS, DEFAULTS, EnsemblePipeline, LossSpec, prepare_targets, run_attack
from facecloak.core import AttackConfig, FaceCloakError, RngStream, as_image, to_uint8
from facecloak.detectors import detect_primary_face
from facecloak.embedding import (
    VerificationThreshold,
    calibrate_far_threshold,
    fr_setup_id,
    get_model,
    impostor_scores,
)
from facecloak.evaluation import Gallery
from facecloak.preprocess import PreprocessSpec, bind, preprocess

log = logging.getLogger(__name__)

RUN_FORMAT = "facecloak-attack-run/1"


def default_config(kind: str, **overrides) -> AttackConfig:
    if kind not in ATTACKS:
        raise ValueError(f"unknown attack {kind!r}; expected one of {ATTACKS}")
    params = dict(DEFAULTS[kind])
    params.update({k: v for k, v in overrides.items() if v is not None})
    return AttackConfig(**params)


def run_manifest(
    kind: str,
    config: AttackConfig,
    spec: PreprocessSpec,
    model_id: str,
    source: str = "",
    pool: Sequence[str] = (),
) -> dict:
    return {
        "format": RUN_FORMAT,
        "attack": kind,
        "config": config.to_dict(),
        "preprocess": spec.to_dict(),
        "model": model_id,
        "pool": list(pool),
        "source": source,
    }


def parse_run_manifest(doc: Mapping) -> tuple[str, AttackConfig, PreprocessSpec, str, list[str]]:
    if doc.get("format") != RUN_FORMAT:
        raise FaceCloakError(f"not an attack-run manifest (format {doc.get('format')!r})")
    return (
        doc["attack"],
        AttackConfig.from_dict(doc["config"]),
        PreprocessSpec.from_dict(doc["preprocess"]),
        doc["model"],
        list(doc.get("pool", [])),
    )


def choose_targets(image_id: str, identities: Mapping[str, str], n: int, seed: int) -> list[str]:
    """``n`` images of other identities, drawn once per attacked image."""
    own = identities[image_id]
    candidates = sorted(k for k, ident in identities.items() if ident != own)
    if len(candidates) < n:
        raise FaceCloakError(f"{image_id}: only {len(candidates)} images of other identities for {n} targets")
    gen = RngStream(seed, "targets").child(image_id).generator()
    return [candidates[i] for i in sorted(gen.choice(len(candidates), size=n, replace=False))]


@dataclass
class _Job:
    image_id: str
    image: np.ndarray
    targets: list = field(default_factory=list)


_worker_model = None


def _init_worker(model_id: str) -> None:
    global _worker_model
    torch.set_num_threads(1)
    _worker_model = get_model(model_id)


def _attack_one(job: _Job, kind: str, config: AttackConfig, spec: PreprocessSpec, pool: Sequence[str], model=None):
    model = model or _worker_model
    try:
        x = as_image(job.image)
        base = bind(x, spec)
        if pool and config.ensemble_size:
            pipeline = EnsemblePipeline.from_image(x, base, pool, config.ensemble_crops, config.ensemble_resizes)
        else:
            pipeline = base
        targets = ()
        if kind == "tipim":
            pairs = [(as_image(t), None) for t in job.targets]
            pairs = [(t, detect_primary_face(t, spec.detector)) for t, _ in pairs]
            targets = prepare_targets(pairs, spec, model)
        loss = LossSpec(kind, targets)
        rng = RngStream(config.seed, "attack").child(job.image_id)
        adv = run_attack(x, config, loss, model, pipeline, rng=rng)
        return job.image_id, to_uint8(adv), None
    except FaceCloakError as exc:
        return job.image_id, None, exc


def attack_images(
    images: Mapping[str, np.ndarray],
    identities: Mapping[str, str],
    kind: str,
    config: AttackConfig,
    spec: PreprocessSpec,
    model_id: str,
    pool: Sequence[str] = (),
    workers: int = 1,
) -> tuple[dict[str, np.ndarray], dict[str, Exception]]:
    """Attack every image; returns the adversarial images and the per-image failures.

    Each image's randomness derives from ``(config.seed, image_id)``, so the
    output does not depend on ``workers``.
    """
    if kind == "tipim" and config.num_targets < 1:
        raise FaceCloakError("TIP-IM needs num_targets >= 1")
    jobs = []
    for image_id in sorted(images):
        tids = choose_targets(image_id, identities, config.num_targets, config.seed) if kind == "tipim" else []
        jobs.append(_Job(image_id, np.asarray(images[image_id]), [np.asarray(images[t]) for t in tids]))
    results = []
    if workers <= 1 or len(jobs) <= 1:
        model = get_model(model_id)
        results = [_attack_one(j, kind, config, spec, pool, model) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(model_id,)) as ex:
            futures = [ex.submit(_attack_one, j, kind, config, spec, pool) for j in jobs]
            results = [f.result() for f in futures]
    adv, failures = {}, {}
    for image_id, out, err in results:
        if err is not None:
            log.warning("%s: attack failed: %s", image_id, err)
            failures[image_id] = err
        else:
            adv[image_id] = out
    return adv, failures


def clean_embeddings(images: Mapping[str, np.ndarray], spec: PreprocessSpec, model) -> dict[str, torch.Tensor]:
    out = {}
    with torch.no_grad():
        for image_id in sorted(images):
            x = as_image(images[image_id])
            out[image_id] = model.embed(preprocess(x, spec, detect_primary_face(x, spec.detector)))
    return out


def calibrate(gallery: Gallery, spec: PreprocessSpec, model, far: float) -> VerificationThreshold:
    """Threshold from every cross-identity (probe, clean image) pair under one FR setup."""
    embs = clean_embeddings(gallery.images, spec, model)
    probes = {ident: embs[image_id] for ident, image_id in gallery.probes.items()}
    scores = impostor_scores(probes, embs, gallery.identities)
    return calibrate_far_threshold(scores, far, fr_setup_id(spec, model.model_id))


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)
