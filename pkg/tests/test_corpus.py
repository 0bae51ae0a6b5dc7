import hashlib

import numpy as np
import pytest
from scipy import stats

from cobra_lite.bags import ExtractorSpec
from cobra_lite.corpus import (SyntheticGenConfig, generate_corpus,
                               load_manifest, sample_view)
from cobra_lite.errors import MissingArtifactError


def corpus_digest(root):
    """SHA-256 over every file, keyed by sorted relative path."""
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def test_generate_counts(tmp_path):
    cfg = SyntheticGenConfig(n_classes=3, patients_per_class=10,
                             tiles_per_bag=(64, 128), seed=5)
    extractors = [ExtractorSpec("a", 768, seed=1), ExtractorSpec("b", 1024, seed=2)]
    manifest = generate_corpus(cfg, extractors, [0.5, 2.0], tmp_path)
    assert len(manifest.patients) == 30
    bag_files = list(tmp_path.rglob("*.bag"))
    assert len(bag_files) == 30 * 2 * 2
    # every declared cell resolves
    manifest.validate()
    for pid in manifest.patient_ids:
        for eid in ("a", "b"):
            for mpp in (0.5, 2.0):
                assert len(manifest.bag_paths(pid, eid, mpp)) == 1


def test_zero_separation_statistically_indistinguishable(tmp_path):
    cfg = SyntheticGenConfig(n_classes=2, patients_per_class=12,
                             tiles_per_bag=(32, 64), signal_tile_fraction=0.25,
                             class_separation=0.0, seed=33, mixing_seed=4)
    manifest = generate_corpus(cfg, [ExtractorSpec("e0", 96, seed=1)], [0.5], tmp_path)
    means = np.stack([manifest.pooled_features(p, "e0", 0.5).mean(axis=0)
                      for p in manifest.patient_ids])
    labels = manifest.labels()
    direction = np.random.default_rng(7).standard_normal(96)
    direction /= np.linalg.norm(direction)
    x = means @ direction
    _, p_value = stats.ttest_ind(x[labels == 0], x[labels == 1])
    assert p_value > 0.01  # frozen run: p = 0.8314


def test_high_separation_nearest_centroid_oracle(tmp_path):
    cfg = SyntheticGenConfig(n_classes=3, patients_per_class=10,
                             tiles_per_bag=(32, 64), signal_tile_fraction=0.25,
                             class_separation=8.0, noise_scale=1.0,
                             seed=21, mixing_seed=4)
    manifest = generate_corpus(cfg, [ExtractorSpec("e0", 96, seed=1)], [0.5], tmp_path)
    means = np.stack([manifest.pooled_features(p, "e0", 0.5).mean(axis=0)
                      for p in manifest.patient_ids])
    labels = manifest.labels()
    centroids = np.stack([means[labels == c].mean(axis=0) for c in range(3)])
    d2 = ((means[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    accuracy = float((d2.argmin(axis=1) == labels).mean())
    assert accuracy == 1.0  # frozen oracle value; the contract floor is 0.95
    assert accuracy >= 0.95


def test_generator_determinism(tmp_path):
    cfg = SyntheticGenConfig(n_classes=2, patients_per_class=3,
                             tiles_per_bag=(8, 12), seed=9, mixing_seed=2)
    extractors = [ExtractorSpec("x", 16, seed=3), ExtractorSpec("y", 24, seed=4)]
    generate_corpus(cfg, extractors, [0.5, 1.14], tmp_path / "a")
    generate_corpus(cfg, extractors, [0.5, 1.14], tmp_path / "b")
    assert corpus_digest(tmp_path / "a") == corpus_digest(tmp_path / "b")


def test_manifest_closure_detects_missing_file(small_corpus):
    small_corpus.validate()
    victim = small_corpus.bag_paths(small_corpus.patient_ids[0], "fma", 0.5)[0]
    backup = victim.read_bytes()
    victim.unlink()
    try:
        with pytest.raises(MissingArtifactError):
            small_corpus.validate()
    finally:
        victim.write_bytes(backup)


def test_manifest_load_roundtrip(small_corpus):
    loaded = load_manifest(small_corpus.root)
    assert loaded.patient_ids == small_corpus.patient_ids
    assert [e.id for e in loaded.extractors] == ["fma", "fmb"]
    assert loaded.magnifications == [0.5, 2.0]
    loaded.validate()


def test_tile_alignment_across_extractors(small_corpus):
    """Bags of one (patient, mag) have equal tile counts for every extractor."""
    for pid in small_corpus.patient_ids:
        for mpp in small_corpus.magnifications:
            counts = {eid: small_corpus.pooled_features(pid, eid, mpp).shape[0]
                      for eid in small_corpus.extractor_ids}
            assert len(set(counts.values())) == 1


@pytest.mark.parametrize("field,value,needle", [
    ("n_classes", 0, "n_classes"),
    ("patients_per_class", 0, "patients_per_class"),
    ("tiles_per_bag", (0, 4), "tiles_per_bag"),
    ("tiles_per_bag", (8, 4), "tiles_per_bag"),
    ("signal_tile_fraction", 1.5, "signal_tile_fraction"),
    ("signal_tile_fraction", -0.1, "signal_tile_fraction"),
    ("class_separation", -1.0, "class_separation"),
    ("noise_scale", 0.0, "noise_scale"),
    ("slides_per_patient", 0, "slides_per_patient"),
])
def test_invalid_config_names_field(field, value, needle):
    cfg = SyntheticGenConfig(**{field: value})
    with pytest.raises(ValueError, match=needle):
        cfg.validate()


def test_signal_mask_matches_fraction(small_corpus):
    meta = small_corpus.load_tile_meta(small_corpus.patient_ids[0], 0.5)[0]
    n = len(meta["signal"])
    assert sum(meta["signal"]) == round(0.3 * n)
    assert len(meta["coords"]) == n
    coords = [tuple(c) for c in meta["coords"]]
    assert len(set(coords)) == n  # unique grid cells


# ---------------------------------------------------------------------------
# View sampling
# ---------------------------------------------------------------------------


def test_view_saturation_takes_all_tiles(small_corpus, rng):
    pid = small_corpus.patient_ids[0]
    view = sample_view(small_corpus, pid, rng, max_tiles=768)
    assert view.n_tiles == view.n_total
    pooled = small_corpus.pooled_features(pid, view.extractor_id,
                                          view.magnification_mpp)
    assert np.array_equal(view.features, pooled)


def test_view_caps_at_max_tiles(tmp_path, rng):
    cfg = SyntheticGenConfig(n_classes=1, patients_per_class=1,
                             tiles_per_bag=(2100, 2200), seed=2)
    manifest = generate_corpus(cfg, [ExtractorSpec("e", 8, seed=1)], [0.5], tmp_path)
    view = sample_view(manifest, manifest.patient_ids[0], rng, max_tiles=768)
    assert view.n_tiles == 768
    assert view.n_total > 768
    # without replacement, source order preserved
    assert len(np.unique(view.tile_indices)) == 768
    assert np.all(np.diff(view.tile_indices) > 0)


def test_multi_slide_patient_pools_all_slides(tmp_path, rng):
    cfg = SyntheticGenConfig(n_classes=1, patients_per_class=1,
                             tiles_per_bag=(6, 8), slides_per_patient=3, seed=6)
    manifest = generate_corpus(cfg, [ExtractorSpec("e", 8, seed=1)], [0.5],
                               tmp_path)
    pid = manifest.patient_ids[0]
    bags = manifest.load_bags(pid, "e", 0.5)
    assert len(bags) == 3
    pooled = manifest.pooled_features(pid, "e", 0.5)
    assert pooled.shape[0] == sum(b.n_tiles for b in bags)
    view = sample_view(manifest, pid, rng, max_tiles=768)
    assert view.n_tiles == pooled.shape[0]  # concatenated before subsampling


def test_view_determinism(small_corpus):
    v1 = sample_view(small_corpus, "pt00001", np.random.default_rng(123))
    v2 = sample_view(small_corpus, "pt00001", np.random.default_rng(123))
    assert v1.extractor_id == v2.extractor_id
    assert v1.magnification_mpp == v2.magnification_mpp
    assert np.array_equal(v1.features, v2.features)


def test_view_unknown_patient(small_corpus, rng):
    with pytest.raises(KeyError):
        sample_view(small_corpus, "nobody", rng)


def test_view_cell_uniformity(tmp_path):
    cfg = SyntheticGenConfig(n_classes=1, patients_per_class=1,
                             tiles_per_bag=(4, 6), seed=3)
    extractors = [ExtractorSpec("a", 8, seed=1), ExtractorSpec("b", 8, seed=2)]
    manifest = generate_corpus(cfg, extractors, [0.5, 1.14, 2.0], tmp_path)
    pid = manifest.patient_ids[0]
    rng = np.random.default_rng(77)
    n = 10_000
    counts = {}
    for _ in range(n):
        v = sample_view(manifest, pid, rng)
        counts[(v.extractor_id, v.magnification_mpp)] = counts.get(
            (v.extractor_id, v.magnification_mpp), 0) + 1
    assert len(counts) == 6
    p = 1.0 / 6.0
    sigma = np.sqrt(p * (1 - p) / n)
    for cell, c in counts.items():
        assert abs(c / n - p) < 3 * sigma, (cell, c / n)
