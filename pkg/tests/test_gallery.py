import json
from collections import Counter

import numpy as np
import pytest

from facecloak.gallery import (
    ChecksumError,
    GalleryError,
    GalleryManifest,
    gallery_hash,
    load_gallery,
    read_manifest,
    save_gallery,
    select_probes,
    stratified_sample,
)


def catalog(sizes):
    return [(f"{ident}_{j:03d}", ident) for ident, n in sizes.items() for j in range(n)]


def test_exact_catalog_taken_whole():
    cat = catalog({"a": 3, "b": 3})
    for seed in (0, 1, 2):
        m = stratified_sample(cat, 2, 3, seed)
        assert sorted(e.image_id for e in m.entries) == sorted(k for k, _ in cat)


def test_most_frequent_with_lexicographic_ties():
    cat = catalog({"zed": 5, "amy": 4, "bob": 4, "cat": 4, "dan": 2})
    m = stratified_sample(cat, 3, 2, 0)
    assert sorted(m.by_identity()) == ["amy", "bob", "zed"]


def test_sample_determinism_and_without_replacement():
    cat = catalog({"a": 12, "b": 10})
    m1 = stratified_sample(cat, 2, 10, seed=1)
    m2 = stratified_sample(cat, 2, 10, seed=2)
    again = stratified_sample(cat, 2, 10, seed=1)
    a1 = [e.image_id for e in m1.entries if e.identity == "a"]
    a2 = [e.image_id for e in m2.entries if e.identity == "a"]
    assert len(set(a1)) == 10 and len(set(a2)) == 10
    assert a1 != a2
    assert m1 == again


def test_sample_shortfall_errors():
    with pytest.raises(GalleryError, match="only 2"):
        stratified_sample(catalog({"a": 5, "b": 5}), 3, 2)
    with pytest.raises(GalleryError, match="fewer than 10"):
        stratified_sample(catalog({"a": 12, "b": 9}), 2, 10)


def test_full_scale_shape():
    sizes = {f"id{i:04d}": 10 + (i % 7) for i in range(320)}
    m = select_probes(stratified_sample(catalog(sizes), 300, 10, 0))
    assert len(m.entries) == 3000 and len(m.probes) == 300


def test_probes_single_image():
    m = select_probes(stratified_sample(catalog({"a": 1, "b": 1}), 2, 1))
    assert m.probes == {"a": "a_000", "b": "b_000"}


def test_probe_uniformity():
    m = stratified_sample(catalog({"a": 10}), 1, 10)
    counts = Counter(select_probes(m, seed=s).probes["a"] for s in range(10_000))
    assert len(counts) == 10
    assert all(abs(c - 1000) <= 120 for c in counts.values())


def make_gallery(tmp_path, n=3, m=2):
    gen = np.random.default_rng(0)
    manifest = select_probes(stratified_sample(catalog({f"id{i}": m for i in range(n)}), n, m))
    images = {e.image_id: gen.integers(0, 256, (7, 5, 3), dtype=np.uint8) for e in manifest.entries}
    saved = save_gallery(images, manifest, tmp_path / "g")
    return images, saved


def test_round_trip_is_lossless(tmp_path):
    images, saved = make_gallery(tmp_path)
    loaded, manifest = load_gallery(tmp_path / "g")
    assert manifest == saved
    for k in images:
        assert np.array_equal(images[k], loaded[k])
    assert (tmp_path / "g" / "images" / "id0" / "id0_000.png").exists()


def test_manifest_round_trips_byte_identically(tmp_path):
    sizes = {f"id{i:04d}": 10 for i in range(300)}
    m = select_probes(stratified_sample(catalog(sizes), 300, 10, 0))
    text = json.dumps(m.to_dict(), indent=2, sort_keys=True)
    assert json.dumps(GalleryManifest.from_dict(json.loads(text)).to_dict(), indent=2, sort_keys=True) == text


def test_resave_gives_same_hash(tmp_path):
    images, saved = make_gallery(tmp_path)
    save_gallery(images, saved, tmp_path / "h")
    assert gallery_hash(tmp_path / "g") == gallery_hash(tmp_path / "h")


def test_truncated_image_raises_checksum_error(tmp_path):
    _, saved = make_gallery(tmp_path)
    path = tmp_path / "g" / saved.entries[0].path
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(ChecksumError):
        load_gallery(tmp_path / "g")


def test_missing_manifest(tmp_path):
    with pytest.raises(GalleryError):
        read_manifest(tmp_path)


def test_rejects_non_uint8(tmp_path):
    manifest = stratified_sample(catalog({"a": 1}), 1, 1)
    with pytest.raises(GalleryError):
        save_gallery({"a_000": np.zeros((2, 2, 3))}, manifest, tmp_path)
