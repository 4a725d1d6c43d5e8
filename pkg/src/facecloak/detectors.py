"""Face detector backends and the registry that hands them out.

The seven real detector ids used in the experiments are reserved. They only
resolve once an adapter plugin registers them, and until then they raise
``UnknownBackend``. Plugins are modules found through the
``facecloak.plugins`` entry-point group or as ``*.py`` files on
``FACECLOAK_PLUGIN_PATH``; each one calls :func:`register_backend` (or
:func:`facecloak.embedding.register_model`) when it is imported.

Mock families ship with the package, so transfer experiments can run
without any pretrained detector:

``center<F>``
    Centred crop covering ``F`` percent of each image dimension.
``shift<F>-<dx>-<dy>``
    The same crop offset by ``dx``/``dy`` percent of the width/height
    (signed, e.g. ``shift70--10-0``).
``blob``
    Bounding box of the bright, smoothed foreground. Unlike the geometric
    mocks it depends on pixel content, so a perturbation can move it.
"""

from __future__ import annotations

import importlib.util
import logging
import os
import re
from pathlib import Path
from typing import Callable, Iterable, Protocol, Union

import numpy as np
import torch

from facecloak.core import FaceCloakError, FaceRegion

log = logging.getLogger(__name__)

REFERENCE_BACKENDS = ("mtcnn", "opencv", "dlib", "mediapipe", "yolo", "centerface", "retinaface")
PLUGIN_PATH_ENV = "FACECLOAK_PLUGIN_PATH"
ENTRY_POINT_GROUP = "facecloak.plugins"


class UnknownBackend(FaceCloakError, KeyError):
    pass


class NoFaceFound(FaceCloakError):
    pass


class DetectorBackend(Protocol):
    backend_id: str

    def detect(self, img: torch.Tensor) -> list[FaceRegion]: ...


def _round(v: float) -> int:
    return int(np.floor(v + 0.5))


class FractionalCrop:
    """Fixed crop covering ``fraction`` of each dimension, optionally offset."""

    def __init__(self, backend_id: str, fraction: float, dx: float = 0.0, dy: float = 0.0):
        if not 0 < fraction <= 1:
            raise ValueError(f"crop fraction must be in (0, 1], got {fraction}")
        self.backend_id = backend_id
        self.fraction = fraction
        self.dx = dx
        self.dy = dy

    def detect(self, img):
        H, W = int(img.shape[0]), int(img.shape[1])
        w = max(1, _round(W * self.fraction))
        h = max(1, _round(H * self.fraction))
        x = (W - w) // 2 + _round(W * self.dx)
        y = (H - h) // 2 + _round(H * self.dy)
        return [FaceRegion(x, y, w, h, confidence=1.0, backend_id=self.backend_id)]


class BlobDetector:
    """Box around pixels brighter than the midpoint of the smoothed luminance range."""

    def __init__(self, backend_id: str = "blob", sigma: float = 1.0, level: float = 0.5):
        self.backend_id = backend_id
        self.sigma = sigma
        self.level = level

    def detect(self, img):
        from scipy.ndimage import gaussian_filter

        gray = np.asarray(img.detach().cpu().numpy() if torch.is_tensor(img) else img, dtype=np.float64)
        gray = gray @ np.array([0.299, 0.587, 0.114])
        gray = gaussian_filter(gray, self.sigma, mode="reflect")
        lo, hi = gray.min(), gray.max()
        if hi - lo < 1e-9:
            return []
        ys, xs = np.nonzero(gray >= lo + self.level * (hi - lo))
        x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
        return [FaceRegion(int(x0), int(y0), int(x1 - x0), int(y1 - y0), confidence=1.0, backend_id=self.backend_id)]


class StaticDetector:
    """Returns a fixed list of candidate regions; used for tests and replay."""

    def __init__(self, regions: Iterable[FaceRegion], backend_id: str = "static"):
        self.backend_id = backend_id
        self.regions = list(regions)

    def detect(self, img):
        return list(self.regions)


class OpenCVHaarDetector:
    """OpenCV's frontal-face Haar cascade, used when ``cv2`` is importable."""

    def __init__(self, backend_id: str = "opencv"):
        try:
            import cv2
        except ImportError as exc:
            raise UnknownBackend(f"{backend_id}: opencv is not installed") from exc
        if not hasattr(cv2, "CascadeClassifier"):
            # OpenCV 5 moved the Haar cascades out of the main package
            raise UnknownBackend(f"{backend_id}: this OpenCV build has no Haar cascade support")
        self.backend_id = backend_id
        self._cv2 = cv2
        self._cascade = cv2.CascadeClassifier(cv2.data.haarcascades + "haarcascade_frontalface_default.xml")

    def detect(self, img):
        cv2 = self._cv2
        rgb = np.clip(np.asarray(img.detach().cpu().numpy() if torch.is_tensor(img) else img), 0, 255).astype(np.uint8)
        gray = cv2.cvtColor(rgb, cv2.COLOR_RGB2GRAY)
        boxes, _, weights = self._cascade.detectMultiScale3(gray, scaleFactor=1.1, minNeighbors=5, outputRejectLevels=True)
        if len(boxes) == 0:
            return []
        # level weights are unbounded margins; squash to (0, 1) for ranking
        conf = 1.0 / (1.0 + np.exp(-np.asarray(weights, dtype=np.float64).reshape(-1)))
        return [
            FaceRegion(int(x), int(y), int(w), int(h), confidence=float(c), backend_id=self.backend_id)
            for (x, y, w, h), c in zip(boxes, conf)
        ]


_FACTORIES: dict[str, Callable[[], DetectorBackend]] = {
    "blob": lambda: BlobDetector(),
    "opencv": lambda: OpenCVHaarDetector(),
}
_CENTER_RE = re.compile(r"^center(\d+)$")
_SHIFT_RE = re.compile(r"^shift(\d+)-(-?\d+)-(-?\d+)$")
_plugins_loaded = False


def register_backend(backend_id: str, factory: Callable[[], DetectorBackend]) -> None:
    _FACTORIES[backend_id] = factory


def _mock_backend(backend_id: str):
    m = _CENTER_RE.match(backend_id)
    if m:
        return FractionalCrop(backend_id, int(m.group(1)) / 100)
    m = _SHIFT_RE.match(backend_id)
    if m:
        f, dx, dy = (int(g) for g in m.groups())
        return FractionalCrop(backend_id, f / 100, dx / 100, dy / 100)
    return None


def load_plugins(force: bool = False) -> None:
    """Import plugin modules from entry points and ``FACECLOAK_PLUGIN_PATH``."""
    global _plugins_loaded
    if _plugins_loaded and not force:
        return
    _plugins_loaded = True
    from importlib.metadata import entry_points

    for ep in entry_points(group=ENTRY_POINT_GROUP):
        try:
            ep.load()
        except Exception:
            log.exception("failed to load plugin entry point %s", ep.name)
    for directory in filter(None, os.environ.get(PLUGIN_PATH_ENV, "").split(os.pathsep)):
        for path in sorted(Path(directory).glob("*.py")):
            spec = importlib.util.spec_from_file_location(f"facecloak_plugin_{path.stem}", path)
            try:
                module = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(module)
            except Exception:
                log.exception("failed to load plugin %s", path)


def get_backend(backend_id: str) -> DetectorBackend:
    """A fresh backend instance for ``backend_id``."""
    mock = _mock_backend(backend_id)
    if mock is not None:
        return mock
    if backend_id not in _FACTORIES:
        load_plugins()
    if backend_id not in _FACTORIES:
        raise UnknownBackend(f"no detector backend registered for {backend_id!r}")
    return _FACTORIES[backend_id]()


def available_backends() -> list[str]:
    load_plugins()
    out = []
    for backend_id in sorted(_FACTORIES):
        try:
            get_backend(backend_id)
        except UnknownBackend:
            continue
        out.append(backend_id)
    return out


def _rank_key(region: FaceRegion):
    conf = region.confidence if region.confidence is not None else 0.0
    return (-conf, -region.area, region.y, region.x)


def select_primary(regions: Iterable[FaceRegion], height: int, width: int) -> FaceRegion:
    """Highest confidence, then largest area, then top-left-most, clipped to the image."""
    clipped = [r for r in (reg.clipped(height, width) for reg in regions) if r is not None]
    if not clipped:
        raise NoFaceFound("detector returned no face inside the image")
    return min(clipped, key=_rank_key)


def detect_primary_face(img: torch.Tensor, backend: Union[str, DetectorBackend]) -> FaceRegion:
    det = get_backend(backend) if isinstance(backend, str) else backend
    with torch.no_grad():
        regions = det.detect(img.detach() if torch.is_tensor(img) else img)
    try:
        return select_primary(regions, int(img.shape[0]), int(img.shape[1]))
    except NoFaceFound:
        raise NoFaceFound(f"{det.backend_id}: no face found") from None
