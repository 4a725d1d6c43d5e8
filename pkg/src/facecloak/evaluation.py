"""Recognition metrics, transfer matrices and the IoU/degradation analysis.

Scores follow one pairing throughout: every adversarial image is compared
with the clean probe of its identity, embedded under the evaluating FR
setup's own detector and interpolation.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from facecloak.core import FaceRegion, ImageError, as_image
from facecloak.detectors import NoFaceFound, detect_primary_face
from facecloak.embedding import (
    EmbeddingModel,
    VerificationThreshold,
    cosine_similarity,
    fr_setup_id,
)
from facecloak.preprocess import PreprocessSpec, preprocess

I9_COUNT = 9


def i1(probe_emb, adv_emb) -> float:
    """Similarity of a probe to the adversarial version of the same photo."""
    return cosine_similarity(probe_emb, adv_emb)


def i9(probe_emb, adv_embs: Sequence) -> float:
    """Mean similarity of a probe to the identity's nine other adversarial images."""
    if len(adv_embs) != I9_COUNT:
        raise ValueError(f"I9 needs exactly {I9_COUNT} embeddings, got {len(adv_embs)}")
    return float(np.mean([cosine_similarity(probe_emb, e) for e in adv_embs]))


def asr(scores: Iterable[float], threshold: VerificationThreshold, setup_id: Optional[str] = None, undetected: int = 0) -> float:
    """Fraction of adversarial images rejected at ``threshold``.

    ``undetected`` images, where the evaluating detector found no face,
    count as rejected.
    """
    threshold.check_setup(setup_id)
    s = np.asarray(list(scores), dtype=np.float64)
    n = s.size + undetected
    if n == 0:
        raise ValueError("ASR of an empty set of adversarial images")
    return (int(np.count_nonzero(s < threshold.value)) + undetected) / n


def fraction_accepted(scores: Iterable[float], threshold: VerificationThreshold) -> float:
    s = np.asarray(list(scores), dtype=np.float64)
    return int(np.count_nonzero(s >= threshold.value)) / s.size


def iou(a: FaceRegion, b: FaceRegion) -> float:
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def psnr(orig, adv) -> float:
    """Peak signal-to-noise ratio in dB with peak 255; ``inf`` for identical images."""
    a = torch.as_tensor(orig, dtype=torch.float64)
    b = torch.as_tensor(adv, dtype=torch.float64)
    if a.shape != b.shape:
        raise ImageError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(torch.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


@dataclass(frozen=True)
class Gallery:
    """Images keyed by image id, plus identity labels, probes and provenance."""

    images: Mapping[str, np.ndarray]
    identities: Mapping[str, str]
    probes: Mapping[str, str]
    attack_id: str = "clean"
    attack_spec: Optional[PreprocessSpec] = None

    def by_identity(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for image_id in sorted(self.images):
            out.setdefault(self.identities[image_id], []).append(image_id)
        return out


@dataclass(frozen=True)
class TransferCell:
    attack_id: str
    attack_spec: str
    eval_spec: str
    i1: float
    i9: float
    asr: float
    n: int
    undetected: int = 0

    def to_row(self) -> dict:
        return asdict(self)


def _embed(model, img, spec, region):
    with torch.no_grad():
        return model.embed(preprocess(as_image(img), spec, region))


def _probe_embeddings(clean: Gallery, spec: PreprocessSpec, model) -> dict[str, torch.Tensor]:
    out = {}
    for ident, image_id in sorted(clean.probes.items()):
        img = as_image(clean.images[image_id])
        out[ident] = _embed(model, img, spec, detect_primary_face(img, spec.detector))
    return out


def evaluate_cell(
    adv: Gallery,
    clean: Gallery,
    spec: PreprocessSpec,
    model: EmbeddingModel,
    threshold: VerificationThreshold,
) -> TransferCell:
    """I1, I9 and ASR of one adversarial gallery under one FR setup.

    I1 averages over probes, I9 over identities. The ASR counts every
    adversarial image, scored against its identity's probe. Regions come
    from the clean images (detection is not re-run on the attacked ones),
    so a clean image where the evaluating detector fails is counted as
    undetected.
    """
    setup = fr_setup_id(spec, model.model_id)
    threshold.check_setup(setup)
    probes = _probe_embeddings(clean, spec, model)
    embs: dict[str, torch.Tensor] = {}
    undetected = 0
    for image_id in sorted(adv.images):
        try:
            region = detect_primary_face(as_image(clean.images[image_id]), spec.detector)
        except NoFaceFound:
            undetected += 1
            continue
        embs[image_id] = _embed(model, adv.images[image_id], spec, region)
    i1s, i9s, scores = [], [], []
    for ident, ids in adv.by_identity().items():
        probe_id = clean.probes[ident]
        p = probes[ident]
        if probe_id in embs:
            i1s.append(i1(p, embs[probe_id]))
        others = [embs[k] for k in ids if k != probe_id and k in embs]
        if len(others) == I9_COUNT:
            i9s.append(i9(p, others))
        scores.extend(cosine_similarity(p, embs[k]) for k in ids if k in embs)
    return TransferCell(
        attack_id=adv.attack_id,
        attack_spec=adv.attack_spec.label if adv.attack_spec else "",
        eval_spec=spec.label,
        i1=float(np.mean(i1s)) if i1s else math.nan,
        i9=float(np.mean(i9s)) if i9s else math.nan,
        asr=asr(scores, threshold, setup, undetected),
        n=len(scores) + undetected,
        undetected=undetected,
    )


def build_transfer_matrix(
    adv_galleries: Sequence[Gallery],
    clean: Gallery,
    fr_setups: Sequence[PreprocessSpec],
    thresholds: Mapping[str, VerificationThreshold],
    model: EmbeddingModel,
) -> list[TransferCell]:
    """One cell per (gallery, FR setup), galleries and setups in the given order."""
    missing = [fr_setup_id(s, model.model_id) for s in fr_setups if fr_setup_id(s, model.model_id) not in thresholds]
    if missing:
        raise KeyError(f"no threshold for FR setup(s): {', '.join(missing)}")
    return [
        evaluate_cell(g, clean, s, model, thresholds[fr_setup_id(s, model.model_id)])
        for g in adv_galleries
        for s in fr_setups
    ]


@dataclass(frozen=True)
class CropShiftRecord:
    attack_id: str
    mean_iou: float
    i1_original_region: float
    i1_recalculated_region: float
    n: int
    undetected: int = 0


def crop_shift_analysis(clean: Gallery, adv: Gallery, spec: PreprocessSpec, model: EmbeddingModel) -> CropShiftRecord:
    """Compare I1 under the clean-image region and a region re-detected on the attacked probe."""
    probes = _probe_embeddings(clean, spec, model)
    ious, orig_scores, recalc_scores = [], [], []
    undetected = 0
    for ident, probe_id in sorted(clean.probes.items()):
        a = as_image(adv.images[probe_id])
        region = detect_primary_face(as_image(clean.images[probe_id]), spec.detector)
        orig_scores.append(i1(probes[ident], _embed(model, a, spec, region)))
        try:
            redetected = detect_primary_face(a, spec.detector)
        except NoFaceFound:
            undetected += 1
            continue
        ious.append(iou(region, redetected))
        recalc_scores.append(i1(probes[ident], _embed(model, a, spec, redetected)))
    return CropShiftRecord(
        attack_id=adv.attack_id,
        mean_iou=float(np.mean(ious)) if ious else math.nan,
        i1_original_region=float(np.mean(orig_scores)),
        i1_recalculated_region=float(np.mean(recalc_scores)) if recalc_scores else math.nan,
        n=len(orig_scores),
        undetected=undetected,
    )


def mean_region_iou(images: Iterable, det_a: str, det_b: str) -> float:
    vals = []
    for img in images:
        img = as_image(img)
        vals.append(iou(detect_primary_face(img, det_a), detect_primary_face(img, det_b)))
    return float(np.mean(vals))


def percentage_degradation(whitebox: float, other: float) -> float:
    """Percent change of a similarity score relative to the whitebox cell."""
    if whitebox == 0:
        raise ZeroDivisionError("whitebox score is zero; percentage change undefined")
    return 100.0 * (other - whitebox) / abs(whitebox)


@dataclass(frozen=True)
class Regression:
    r2: float
    p: float
    slope: float
    intercept: float
    n: int


def _r2(x: np.ndarray, y: np.ndarray) -> float:
    xc, yc = x - x.mean(), y - y.mean()
    return float((xc @ yc) ** 2 / ((xc @ xc) * (yc @ yc)))


def regress_iou_degradation(points: Sequence[tuple[float, float]], seed: int = 0, n_permutations: int = 10_000) -> Regression:
    """OLS of degradation on IoU with a two-sided permutation p-value.

    The p-value counts shuffles of the degradations whose R^2 reaches the
    observed one, with the ``(hits + 1) / (n + 1)`` correction.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("regression needs at least 3 (iou, degradation) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("degenerate variance: IoU or degradation is constant")
    r2 = _r2(x, y)
    slope = float(((x - x.mean()) @ (y - y.mean())) / ((x - x.mean()) @ (x - x.mean())))
    intercept = float(y.mean() - slope * x.mean())
    gen = np.random.default_rng(seed)
    xc = x - x.mean()
    shuffled = np.stack([gen.permutation(y) for _ in range(n_permutations)])
    yc = shuffled - shuffled.mean(axis=1, keepdims=True)
    perm_r2 = (yc @ xc) ** 2 / ((xc @ xc) * np.einsum("ij,ij->i", yc, yc))
    hits = int(np.count_nonzero(perm_r2 >= r2 - 1e-12))
    return Regression(min(1.0, r2), (hits + 1) / (n_permutations + 1), slope, intercept, len(x))


def degradation_points(cells: Sequence[TransferCell], region_iou: Mapping[tuple[str, str], float], metric: str = "i1"):
    """(IoU, percent change vs whitebox) for every off-diagonal cell.

    ``region_iou`` maps (attack detector, eval detector) to the mean IoU of
    their regions. Diagonal cells are those whose eval spec equals the
    attack spec.
    """
    whitebox = {(c.attack_id, c.attack_spec): getattr(c, metric) for c in cells if c.eval_spec == c.attack_spec}
    out = []
    for c in cells:
        if c.eval_spec == c.attack_spec:
            continue
        key = (c.attack_id, c.attack_spec)
        if key not in whitebox:
            continue
        det_a, det_e = c.attack_spec.split("/")[0], c.eval_spec.split("/")[0]
        if (det_a, det_e) not in region_iou:
            continue
        out.append((region_iou[(det_a, det_e)], percentage_degradation(whitebox[key], getattr(c, metric))))
    return out


FIELDS = ["attack_id", "attack_spec", "eval_spec", "i1", "i9", "asr", "n", "undetected"]


def cells_to_csv(cells: Sequence[TransferCell]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
    w.writeheader()
    for c in cells:
        row = c.to_row()
        w.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in FIELDS})
    return buf.getvalue()


def cells_from_csv(text: str) -> list[TransferCell]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(
            TransferCell(
                row["attack_id"],
                row["attack_spec"],
                row["eval_spec"],
                float(row["i1"]),
                float(row["i9"]),
                float(row["asr"]),
                int(row["n"]),
                int(row.get("undetected") or 0),
            )
        )
    return out


def summary(cells: Sequence[TransferCell]) -> str:
    """Machine-readable JSON summary; NaN is written as null."""

    def clean(v):
        return None if isinstance(v, float) and math.isnan(v) else v

    doc = {"cells": [{k: clean(v) for k, v in c.to_row().items()} for c in cells]}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def render_grid(cells: Sequence[TransferCell], metric: str = "i1") -> str:
    """Markdown grid, one row per (attack, attack spec), one column per eval spec.

    The best attack result in each row is bolded: the minimum for I1/I9,
    the maximum for ASR.
    """
    rows: dict[tuple[str, str], dict[str, float]] = {}
    cols: list[str] = []
    for c in cells:
        rows.setdefault((c.attack_id, c.attack_spec), {})[c.eval_spec] = getattr(c, metric)
        if c.eval_spec not in cols:
            cols.append(c.eval_spec)
    pick = max if metric == "asr" else min
    lines = [
        f"| {metric.upper()} | " + " | ".join(cols) + " |",
        "|---|" + "---|" * len(cols),
    ]
    for (attack, spec), vals in rows.items():
        finite = [v for v in vals.values() if not math.isnan(v)]
        best = pick(finite) if finite else None
        cells_txt = []
        for col in cols:
            v = vals.get(col)
            if v is None:
                cells_txt.append("")
            else:
                txt = f"{v:.2f}"
                cells_txt.append(f"**{txt}**" if best is not None and v == best else txt)
        lines.append(f"| {attack} @ {spec} | " + " | ".join(cells_txt) + " |")
    return "\n".join(lines) + "\n"
