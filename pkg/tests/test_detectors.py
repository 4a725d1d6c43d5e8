import os
import textwrap

import numpy as np
import pytest
import torch

from facecloak import detectors
from facecloak.core import FaceRegion, as_image
from facecloak.detectors import (
    REFERENCE_BACKENDS,
    NoFaceFound,
    StaticDetector,
    UnknownBackend,
    detect_primary_face,
    get_backend,
    select_primary,
)
from facecloak.synthetic import make_faces


def blank(h=100, w=100):
    return torch.zeros(h, w, 3, dtype=torch.float64)


def test_center70_on_100x100():
    assert detect_primary_face(blank(), "center70").box == (15, 15, 70, 70)


def test_shift_detector_offsets_by_percent():
    r = detect_primary_face(blank(), "shift70-10--5")
    assert r.box == (25, 10, 70, 70)


def test_confidence_wins():
    det = StaticDetector([FaceRegion(0, 0, 10, 10, 0.7), FaceRegion(5, 5, 4, 4, 0.9)])
    assert detect_primary_face(blank(20, 20), det).box == (5, 5, 4, 4)


def test_ties_break_on_area_then_position():
    regions = [FaceRegion(6, 2, 4, 4, 0.8), FaceRegion(3, 2, 4, 4, 0.8), FaceRegion(0, 9, 3, 3, 0.8), FaceRegion(1, 1, 2, 2, 0.8)]
    assert select_primary(regions, 20, 20).box == (3, 2, 4, 4)
    regions = [FaceRegion(6, 2, 4, 4, 0.8), FaceRegion(3, 5, 4, 4, 0.8)]
    assert select_primary(regions, 20, 20).box == (6, 2, 4, 4)


def test_selected_region_is_clipped():
    det = StaticDetector([FaceRegion(-5, 15, 10, 10, 1.0)])
    assert detect_primary_face(blank(20, 20), det).box == (0, 15, 5, 5)


def test_no_face():
    with pytest.raises(NoFaceFound):
        detect_primary_face(blank(), StaticDetector([]))
    with pytest.raises(NoFaceFound):
        detect_primary_face(blank(), StaticDetector([FaceRegion(200, 0, 5, 5)]))
    with pytest.raises(NoFaceFound):
        detect_primary_face(blank(), "blob")


@pytest.mark.parametrize("backend_id", [b for b in REFERENCE_BACKENDS if b != "opencv"] + ["nonsense"])
def test_reserved_ids_raise_unknown_backend(backend_id):
    with pytest.raises(UnknownBackend):
        get_backend(backend_id)


def test_plugin_from_path(tmp_path, monkeypatch):
    (tmp_path / "myplug.py").write_text(
        textwrap.dedent(
            """
            from facecloak.core import FaceRegion
            from facecloak.detectors import StaticDetector, register_backend
            register_backend("mtcnn", lambda: StaticDetector([FaceRegion(1, 2, 3, 4, 0.99)], "mtcnn"))
            """
        )
    )
    monkeypatch.setenv(detectors.PLUGIN_PATH_ENV, str(tmp_path))
    monkeypatch.setattr(detectors, "_FACTORIES", dict(detectors._FACTORIES))
    detectors.load_plugins(force=True)
    assert detect_primary_face(blank(10, 10), "mtcnn").box == (1, 2, 3, 4)
    monkeypatch.setattr(detectors, "_plugins_loaded", False)


def test_broken_plugin_does_not_crash(tmp_path, monkeypatch):
    (tmp_path / "bad.py").write_text("raise RuntimeError('boom')\n")
    monkeypatch.setenv(detectors.PLUGIN_PATH_ENV, str(tmp_path))
    detectors.load_plugins(force=True)
    with pytest.raises(UnknownBackend):
        get_backend("dlib")
    monkeypatch.setattr(detectors, "_plugins_loaded", False)


def test_blob_finds_synthetic_face_and_is_pure():
    faces = make_faces(3, 2)
    for _, (_, img) in sorted(faces.items()):
        x = as_image(img)
        r = detect_primary_face(x, "blob")
        assert r == detect_primary_face(x, "blob")
        cx, cy = r.x + r.w / 2, r.y + r.h / 2
        assert abs(cx - 8) <= 2.5 and abs(cy - 8) <= 2.5
        assert 6 <= r.w <= 14 and 8 <= r.h <= 16


def test_opencv_backend_if_available():
    cv2 = pytest.importorskip("cv2")
    if not hasattr(cv2, "CascadeClassifier"):
        with pytest.raises(UnknownBackend):
            get_backend("opencv")
        return
    det = get_backend("opencv")
    assert det.detect(blank(64, 64)) == []
