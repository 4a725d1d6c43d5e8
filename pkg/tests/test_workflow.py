import numpy as np
import pytest

from facecloak import gallery
from facecloak.cli import main
from facecloak.core import FaceCloakError
from facecloak.evaluation import Gallery, build_transfer_matrix, crop_shift_analysis, evaluate_cell
from facecloak.preprocess import PreprocessSpec
from facecloak.synthetic import make_faces
from facecloak.workflow import attack_images, calibrate, choose_targets, default_config, parse_run_manifest, run_manifest


@pytest.fixture(scope="module")
def clean():
    faces = make_faces(10, 2)
    images = {k: v[1] for k, v in faces.items()}
    identities = {k: v[0] for k, v in faces.items()}
    probes = {}
    for k in sorted(images):
        probes.setdefault(identities[k], k)
    return Gallery(images, identities, probes)


@pytest.fixture(scope="module")
def mim_gallery(clean):
    spec = PreprocessSpec("center70")
    adv, failures = attack_images(clean.images, clean.identities, "mim", default_config("mim", iterations=40), spec, "toy")
    assert not failures
    return Gallery(adv, clean.identities, clean.probes, "mim", spec)


SETUPS = [PreprocessSpec(d) for d in ("center70", "shift70-10-0", "shift70-20-0")]


def thresholds(clean, model):
    return {f"{s.label}/{model.model_id}": calibrate(clean, s, model, 0.05) for s in SETUPS}


def test_diagonal_has_row_minimum(clean, mim_gallery, model):
    cells = build_transfer_matrix([mim_gallery], clean, SETUPS, thresholds(clean, model), model)
    assert [c.eval_spec for c in cells] == [s.label for s in SETUPS]
    assert min(cells, key=lambda c: c.i1).eval_spec == mim_gallery.attack_spec.label


def test_cell_counts(clean, mim_gallery, model):
    cells = build_transfer_matrix([mim_gallery, clean], clean, SETUPS[:2], thresholds(clean, model), model)
    assert len(cells) == 4
    for row in (cells[:2], cells[2:]):
        assert sum(c.n for c in row) == len(clean.images) * 2


def test_attacks_never_help(clean, mim_gallery, model):
    t = thresholds(clean, model)["center70/area/toy"]
    spec = SETUPS[0]
    clean_cell = evaluate_cell(clean, clean, spec, model, t)
    adv_cell = evaluate_cell(mim_gallery, clean, spec, model, t)
    assert clean_cell.i1 == pytest.approx(1.0)
    assert adv_cell.i1 <= clean_cell.i1
    # per-probe: 95th percentile of (adv - clean) stays non-positive
    from facecloak.evaluation import _embed, _probe_embeddings, i1
    from facecloak.detectors import detect_primary_face
    from facecloak.core import as_image

    probes = _probe_embeddings(clean, spec, model)
    diffs = []
    for ident, pid in clean.probes.items():
        region = detect_primary_face(as_image(clean.images[pid]), spec.detector)
        diffs.append(i1(probes[ident], _embed(model, mim_gallery.images[pid], spec, region)) - i1(probes[ident], _embed(model, clean.images[pid], spec, region)))
    assert np.percentile(diffs, 95) <= 0


def test_asr_is_high_whitebox(clean, mim_gallery, model):
    t = thresholds(clean, model)["center70/area/toy"]
    assert evaluate_cell(mim_gallery, clean, SETUPS[0], model, t).asr > evaluate_cell(clean, clean, SETUPS[0], model, t).asr


def test_crop_shift_on_clean_is_trivial(clean, model):
    r = crop_shift_analysis(clean, clean, SETUPS[0], model)
    assert r.mean_iou == 1.0
    assert r.i1_original_region == r.i1_recalculated_region
    assert r.undetected == 0


def test_choose_targets_excludes_own_identity(clean):
    ts = choose_targets("id000_00", clean.identities, 5, 0)
    assert len(set(ts)) == 5 and all(clean.identities[t] != "id000" for t in ts)
    assert ts == choose_targets("id000_00", clean.identities, 5, 0)
    with pytest.raises(FaceCloakError):
        choose_targets("id000_00", clean.identities, 100, 0)


def test_run_manifest_round_trip():
    cfg = default_config("tipim", seed=3)
    spec = PreprocessSpec("shift70-10-0", "bicubic")
    assert parse_run_manifest(run_manifest("tipim", cfg, spec, "toy", "/x", ["center60"])) == ("tipim", cfg, spec, "toy", ["center60"])
    with pytest.raises(FaceCloakError):
        parse_run_manifest({"format": "other"})


def test_defaults_encode_attack_settings():
    assert (default_config("mim").epsilon, default_config("mim").iterations, default_config("mim").momentum) == (8.0, 100, 1.0)
    assert (default_config("lowkey").iterations, default_config("lowkey").gamma) == (50, 0.05)
    assert (default_config("tipim").epsilon, default_config("tipim").iterations) == (12.0, 50)
    with pytest.raises(ValueError):
        default_config("cw")


def test_cli_mim_drop_and_inputs_untouched(tmp_path, model):
    src = tmp_path / "clean"
    assert main(["synth", "--identities", "12", "--per-identity", "2", "--out", str(src)]) == 0
    before = gallery.gallery_hash(src)
    out = tmp_path / "mim"
    assert main(["attack", str(src), "--attack", "mim", "--workers", "1", "--out", str(out)]) == 0
    assert gallery.gallery_hash(src) == before
    images, m = gallery.load_gallery(src)
    adv, _ = gallery.load_gallery(out)
    c = Gallery(images, m.identities, m.probes)
    a = Gallery(adv, m.identities, m.probes, "mim", SETUPS[0])
    t = calibrate(c, SETUPS[0], model, 0.05)
    drop = evaluate_cell(c, c, SETUPS[0], model, t).i1 - evaluate_cell(a, c, SETUPS[0], model, t).i1
    assert drop >= 0.3
