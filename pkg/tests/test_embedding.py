import json
import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference, rel_error
from facecloak.core import as_image
from facecloak.embedding import (
    SetupMismatch,
    ToyEmbeddingModel,
    UnknownModel,
    VerificationThreshold,
    calibrate_far_threshold,
    cosine_similarity,
    false_accept_rate,
    fr_setup_id,
    get_model,
    impostor_scores,
    load_thresholds,
    save_thresholds,
    verify,
)
from facecloak.preprocess import PreprocessSpec, bind, preprocess

vec = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False))


def test_cosine_examples():
    assert cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 5]) == 0.0
    assert cosine_similarity([1, 1, 0], [1, 0, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_similarity([1, 0, 0], [1, 0])


@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_properties(a, b, lam):
    assume(np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6)
    c = cosine_similarity(a, b)
    assert -1.0 <= c <= 1.0
    assert c == pytest.approx(cosine_similarity(b, a), abs=1e-12)
    assert c == pytest.approx(cosine_similarity(lam * a, b), abs=1e-9)


def brute_force_threshold(scores, far):
    # scan every candidate threshold (each score and just above it); keep the smallest feasible
    cands = sorted(set(scores) | {np.nextafter(s, np.inf) for s in scores})
    for t in cands:
        if np.mean(np.asarray(scores) >= t) <= far:
            return t
    return None


def test_evenly_spaced_scores_accept_one_of_twenty():
    scores = list(np.arange(20) * 0.1 / 2)
    t = calibrate_far_threshold(scores, 0.05)
    assert int(np.sum(np.asarray(scores) >= t.value)) == 1
    assert t.value == brute_force_threshold(scores, 0.05)


def test_identical_scores():
    t = calibrate_far_threshold([0.3] * 50, 0.05)
    assert t.value > 0.3
    assert false_accept_rate([0.3] * 50, t) == 0.0


def test_far_zero_accepts_nothing():
    s = [0.1, 0.5, 0.9]
    t = calibrate_far_threshold(s, 0.0)
    assert t.value > 0.9 and false_accept_rate(s, t) == 0.0


def test_calibration_errors():
    with pytest.raises(ValueError):
        calibrate_far_threshold([], 0.05)
    with pytest.raises(ValueError):
        calibrate_far_threshold([0.1], 1.0)
    with pytest.raises(ValueError):
        calibrate_far_threshold([0.1, math.nan], 0.05)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=200), st.floats(0, 0.5))
def test_calibration_matches_brute_force(scores, far):
    t = calibrate_far_threshold(scores, far)
    assert false_accept_rate(scores, t) <= far + 1e-12
    assert t.value == brute_force_threshold(scores, far)


def test_verify_boundary_and_setup():
    t = VerificationThreshold(0.15, 0.05, "center70/area/toy")
    a = np.array([1.0, 0.0])
    for score, ok in ((0.16, True), (0.14, False), (0.15, True)):
        b = np.array([score, math.sqrt(1 - score * score)])
        c = cosine_similarity(a, b)
        assert verify(a, b, VerificationThreshold(c if score == 0.15 else 0.15, 0.05)) is ok
    assert verify(a, a, t, "center70/area/toy")
    with pytest.raises(SetupMismatch):
        verify(a, a, t, "center80/area/toy")


def test_fr_setup_id():
    assert fr_setup_id(PreprocessSpec("center70", "bilinear"), "toy") == "center70/bilinear/toy"


def test_toy_model_determinism_and_identity(faces):
    m1, m2 = ToyEmbeddingModel(0), ToyEmbeddingModel(0)
    x = as_image(next(iter(faces.values()))[1])
    spec = PreprocessSpec("center70")
    v = preprocess(x, spec, bind(x, spec).region)
    e1, e2 = m1.embed(v), m2.embed(v)
    assert torch.equal(e1, e2)
    assert cosine_similarity(e1, e1) == pytest.approx(1.0)
    assert e1.shape == (32,)
    assert not torch.equal(ToyEmbeddingModel(1).embed(v), e1)


def test_toy_model_gradient_contract(model):
    gen = np.random.default_rng(0)
    v = torch.tensor(gen.normal(0, 0.3, (16, 16, 3)))
    w = torch.tensor(gen.normal(size=32))

    def loss(z):
        return w @ model.embed(z)

    _, g = model.value_and_input_gradient(loss, v)
    assert rel_error(g, central_difference(loss, v, h=1e-5)) < 1e-4


def test_toy_model_lipschitz_bound(model):
    gen = np.random.default_rng(1)
    bound = float(torch.linalg.matrix_norm(model.weight, ord=2))
    for _ in range(20):
        a = torch.tensor(gen.normal(0, 0.5, (16, 16, 3)))
        b = a + torch.tensor(gen.normal(0, 0.05, (16, 16, 3)))
        assert (model.embed(a) - model.embed(b)).norm() <= bound * (a - b).norm() + 1e-12


def test_toy_input_size_checked(model):
    with pytest.raises(ValueError):
        model.embed(torch.zeros(8, 8, 3, dtype=torch.float64))


def test_model_registry():
    assert get_model("toy").model_id == "toy"
    assert get_model("toy:3").model_id == "toy:3"
    with pytest.raises(UnknownModel):
        get_model("arcface")


def test_genuine_above_impostor_on_fixture(model):
    from facecloak.synthetic import make_faces

    faces = make_faces(8, 4)
    spec = PreprocessSpec("center70")
    embs = {k: model.embed(preprocess(as_image(v[1]), spec, bind(as_image(v[1]), spec).region)) for k, v in faces.items()}
    ids = sorted(embs)
    gen, imp = [], []
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            (gen if faces[a][0] == faces[b][0] else imp).append(cosine_similarity(embs[a], embs[b]))
    assert np.mean(gen) > np.mean(imp) + 0.05


def test_impostor_scores_exclude_genuine():
    embs = {"a0": [1.0, 0.0], "a1": [0.9, 0.1], "b0": [0.0, 1.0]}
    ident = {"a0": "a", "a1": "a", "b0": "b"}
    probes = {"a": embs["a0"], "b": embs["b0"]}
    s = impostor_scores(probes, embs, ident)
    assert len(s) == 3
    assert sorted(np.round(s, 6)) == sorted(np.round([0.0, 0.0, cosine_similarity([0, 1], [0.9, 0.1])], 6))


def test_threshold_file_round_trip_and_merge(tmp_path):
    p = tmp_path / "t.json"
    save_thresholds(p, [VerificationThreshold(0.4, 0.05, "s1")])
    save_thresholds(p, [VerificationThreshold(0.5, 0.01, "s1"), VerificationThreshold(0.3, 0.05, "s2")])
    table = load_thresholds(p)
    assert set(table) == {("s1", 0.05), ("s1", 0.01), ("s2", 0.05)}
    assert table[("s1", 0.01)].value == 0.5
    text = p.read_text()
    save_thresholds(p, [])
    assert p.read_text() == text
    assert [f.name for f in tmp_path.iterdir()] == ["t.json"]


def test_threshold_write_failure_leaves_no_file(tmp_path, monkeypatch):
    p = tmp_path / "t.json"

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(json, "dump", boom)
    with pytest.raises(OSError):
        save_thresholds(p, [VerificationThreshold(0.4, 0.05, "s1")])
    assert list(tmp_path.iterdir()) == []
