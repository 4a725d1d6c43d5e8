"""Gallery sampling, probe selection and lossless on-disk galleries.

Layout of a gallery directory::

    manifest.json
    attack_run.json              (adversarial galleries only)
    images/<identity>/<image_id>.png

The manifest lists every image with its identity and SHA-256, so a gallery
can be verified and re-evaluated from the directory alone.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
from PIL import Image

from facecloak.core import FaceCloakError, RngStream

MANIFEST = "manifest.json"
RUN_MANIFEST = "attack_run.json"


class GalleryError(FaceCloakError):
    pass


class ChecksumError(GalleryError):
    pass


@dataclass(frozen=True)
class Entry:
    image_id: str
    identity: str
    path: str = ""
    sha256: str = ""


@dataclass(frozen=True)
class GalleryManifest:
    dataset_id: str
    entries: tuple[Entry, ...]
    k: int = 0
    m: int = 0
    seed: int = 0
    probes: Mapping[str, str] = field(default_factory=dict)

    @property
    def identities(self) -> dict[str, str]:
        return {e.image_id: e.identity for e in self.entries}

    def by_identity(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for e in self.entries:
            out.setdefault(e.identity, []).append(e.image_id)
        return out

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "sampling": {"k": self.k, "m": self.m, "seed": self.seed},
            "probes": dict(sorted(self.probes.items())),
            "entries": [
                {"image_id": e.image_id, "identity": e.identity, "path": e.path, "sha256": e.sha256}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GalleryManifest":
        s = d.get("sampling", {})
        return cls(
            dataset_id=d["dataset_id"],
            entries=tuple(Entry(**e) for e in d["entries"]),
            k=s.get("k", 0),
            m=s.get("m", 0),
            seed=s.get("seed", 0),
            probes=dict(d.get("probes", {})),
        )


def canonical_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def stratified_sample(
    catalog: Iterable[tuple[str, str]],
    k: int,
    m: int,
    seed: int = 0,
    dataset_id: str = "catalog",
) -> GalleryManifest:
    """``m`` images of each of the ``k`` most frequent identities.

    ``catalog`` holds ``(image_id, identity)`` pairs. Frequency ties break
    on the identity label. Each identity draws from its own child stream,
    so adding identities to the catalog does not change another's sample.
    """
    catalog = list(catalog)
    counts = Counter(ident for _, ident in catalog)
    ranked = sorted(counts, key=lambda ident: (-counts[ident], ident))
    if len(ranked) < k:
        raise GalleryError(f"need {k} identities, catalog has only {len(ranked)}")
    short = [i for i in ranked[:k] if counts[i] < m]
    if short:
        raise GalleryError(f"{len(short)} of the top {k} identities have fewer than {m} images (e.g. {short[0]}: {counts[short[0]]})")
    members: dict[str, list[str]] = {}
    for image_id, ident in catalog:
        members.setdefault(ident, []).append(image_id)
    root = RngStream(seed, "stratified-sample")
    entries = []
    for ident in sorted(ranked[:k]):
        pool = sorted(members[ident])
        picks = root.child(ident).generator().choice(len(pool), size=m, replace=False)
        entries.extend(Entry(pool[i], ident) for i in sorted(picks))
    return GalleryManifest(dataset_id, tuple(entries), k, m, seed)


def select_probes(manifest: GalleryManifest, seed: Optional[int] = None) -> GalleryManifest:
    """One probe per identity, uniform over its images."""
    root = RngStream(manifest.seed if seed is None else seed, "probes")
    probes = {}
    for ident, ids in sorted(manifest.by_identity().items()):
        ids = sorted(ids)
        probes[ident] = ids[int(root.child(ident).generator().integers(len(ids)))]
    return replace(manifest, probes=probes)


def _encode_png(pixels: np.ndarray) -> bytes:
    import io

    arr = np.asarray(pixels)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise GalleryError(f"gallery images must be HxWx3 uint8, got {arr.dtype} {arr.shape}")
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_gallery(images: Mapping[str, np.ndarray], manifest: GalleryManifest, directory, run_manifest: Optional[dict] = None) -> GalleryManifest:
    """Write PNGs and the manifest; returns the manifest with paths and checksums filled in."""
    directory = Path(directory)
    entries = []
    for e in manifest.entries:
        if e.image_id not in images:
            raise GalleryError(f"manifest entry {e.image_id} has no image")
        data = _encode_png(images[e.image_id])
        rel = f"images/{e.identity}/{e.image_id}.png"
        _write_atomic(directory / rel, data)
        entries.append(Entry(e.image_id, e.identity, rel, hashlib.sha256(data).hexdigest()))
    done = replace(manifest, entries=tuple(entries))
    if run_manifest is not None:
        _write_atomic(directory / RUN_MANIFEST, canonical_json(run_manifest).encode())
    _write_atomic(directory / MANIFEST, canonical_json(done.to_dict()).encode())
    return done


def read_manifest(directory) -> GalleryManifest:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise GalleryError(f"{directory}: no {MANIFEST}")
    return GalleryManifest.from_dict(json.loads(path.read_text()))


def load_gallery(directory) -> tuple[dict[str, np.ndarray], GalleryManifest]:
    """Read and checksum every image; any mismatch raises :class:`ChecksumError`."""
    import io

    directory = Path(directory)
    manifest = read_manifest(directory)
    images = {}
    for e in manifest.entries:
        path = directory / e.path
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise GalleryError(f"{path}: missing image") from None
        if e.sha256 and hashlib.sha256(data).hexdigest() != e.sha256:
            raise ChecksumError(f"{path}: checksum mismatch")
        with Image.open(io.BytesIO(data)) as im:
            images[e.image_id] = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    return images, manifest


def read_run_manifest(directory) -> Optional[dict]:
    path = Path(directory) / RUN_MANIFEST
    return json.loads(path.read_text()) if path.exists() else None


def gallery_hash(directory) -> str:
    """SHA-256 over the manifest and every image file."""
    directory = Path(directory)
    h = hashlib.sha256((directory / MANIFEST).read_bytes())
    for e in read_manifest(directory).entries:
        h.update((directory / e.path).read_bytes())
    return h.hexdigest()
