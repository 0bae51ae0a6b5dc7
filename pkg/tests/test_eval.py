import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from cobra_lite.encoder import EncoderConfig, SlideEncoder
from cobra_lite.evaluation import (EvalDataset, MlpEvalConfig, ProbeConfig,
                                   auroc_binary,
                                   compute_metrics, extract_embeddings,
                                   linear_probe_fewshot, mlp_cv,
                                   read_dataset_tsv, results_csv,
                                   stratified_folds, write_dataset_tsv)

TOY_ENC = dict(d_model=16, attn_heads=2, attn_hidden=6, ssd_heads=2,
               d_state=4, dropout=0.25)


def pair_count_auroc(y, s):
    """O(n^2) oracle: wins + half credit for ties over all pos/neg pairs."""
    pos = s[y == 1]
    neg = s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def blobs(n_per_class, n_classes, dim, sep, seed, imbalance=None,
          center_seed=None):
    center_rng = np.random.default_rng(seed if center_seed is None else center_seed)
    centers = center_rng.standard_normal((n_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= sep
    rng = np.random.default_rng(seed)
    counts = imbalance or [n_per_class] * n_classes
    labels = np.concatenate([np.full(c, i) for i, c in enumerate(counts)])
    emb = centers[labels] + rng.standard_normal((len(labels), dim))
    return emb.astype(np.float32), labels.astype(np.int64)


def make_dataset(emb, labels, seed=0):
    ds = EvalDataset(
        embeddings=emb, labels=labels,
        patient_ids=[f"p{i}" for i in range(len(labels))],
        folds=stratified_folds(labels, 5, seed=seed),
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def test_perfect_ranking():
    y = np.array([0, 0, 1, 1])
    s = np.array([0.1, 0.2, 0.8, 0.9])
    m = compute_metrics(y, s)
    assert m["auroc"] == 1.0
    assert m["auprc"] == 1.0
    assert m["f1"] == 1.0
    assert m["balanced_accuracy"] == 1.0


def test_reversed_ranking_binary():
    y = np.array([0, 0, 0, 1, 1, 1])
    s = np.array([0.9, 0.8, 0.7, 0.3, 0.2, 0.1])
    assert auroc_binary(y, s) == 0.0


def test_six_sample_one_inversion_is_eight_ninths():
    y = np.array([0, 0, 0, 1, 1, 1])
    s = np.array([0.10, 0.20, 0.35, 0.30, 0.40, 0.50])
    assert auroc_binary(y, s) == pair_count_auroc(y, s) == pytest.approx(8 / 9)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(4, 60), seed=st.integers(0, 100_000),
       ties=st.booleans())
def test_auroc_equals_pair_counting(n, seed, ties):
    rng = np.random.default_rng(seed)
    y = np.zeros(n, dtype=int)
    y[rng.choice(n, size=rng.integers(1, n), replace=False)] = 1
    if y.sum() == n:
        y[0] = 0
    s = rng.standard_normal(n)
    if ties:
        s = np.round(s, 1)  # force duplicate scores
    assert auroc_binary(y, s) == pair_count_auroc(y, s)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_auroc_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    y = np.array([0, 1] * 10)
    s = rng.standard_normal(20)
    base = auroc_binary(y, s)
    assert auroc_binary(y, 3 * s + 7) == base
    assert auroc_binary(y, np.exp(s)) == pytest.approx(base, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), n_classes=st.integers(2, 4))
def test_metrics_match_sklearn(seed, n_classes):
    rng = np.random.default_rng(seed)
    n = 40
    y = rng.integers(0, n_classes, size=n)
    while len(np.unique(y)) < n_classes:
        y = rng.integers(0, n_classes, size=n)
    scores = rng.random((n, n_classes))
    scores /= scores.sum(axis=1, keepdims=True)
    got = compute_metrics(y, scores if n_classes > 2 else scores[:, 1])

    if n_classes == 2:
        assert got["auroc"] == pytest.approx(
            skm.roc_auc_score(y, scores[:, 1]), abs=1e-12)
        assert got["auprc"] == pytest.approx(
            skm.average_precision_score(y, scores[:, 1]), abs=1e-12)
        assert got["f1"] == pytest.approx(
            skm.f1_score(y, scores.argmax(1)), abs=1e-12)
    else:
        assert got["auroc"] == pytest.approx(
            skm.roc_auc_score(y, scores, multi_class="ovr", average="macro"),
            abs=1e-12)
        assert got["f1"] == pytest.approx(
            skm.f1_score(y, scores.argmax(1), average="macro"), abs=1e-12)
    assert got["balanced_accuracy"] == pytest.approx(
        skm.balanced_accuracy_score(y, scores.argmax(1)), abs=1e-12)


def test_metrics_rejects_single_class():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros(4, dtype=int), np.arange(4) / 4)


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


def test_folds_partition_and_stratify():
    labels = np.array([0] * 20 + [1] * 15 + [2] * 10)
    folds = stratified_folds(labels, 5, seed=3)
    assert folds.shape == labels.shape
    for f in range(5):
        assert (folds == f).sum() in (8, 9, 10)
        present = np.unique(labels[folds == f])
        assert set(present) == {0, 1, 2}
    # no leakage: validation sets are disjoint and cover everything
    assert sorted(np.concatenate([np.nonzero(folds == f)[0]
                                  for f in range(5)]).tolist()) == list(range(45))


# ---------------------------------------------------------------------------
# MLP protocol
# ---------------------------------------------------------------------------


def test_mlp_cv_separable():
    emb, labels = blobs(30, 2, 24, sep=8.0, seed=1)
    ds = make_dataset(emb, labels)
    result = mlp_cv(ds, MlpEvalConfig(seed=0))
    assert len(result.per_fold) == 5
    assert result.mean["auroc"] >= 0.99


def test_mlp_cv_shuffled_labels_chance():
    emb, labels = blobs(30, 2, 24, sep=8.0, seed=2)
    shuffled = labels.copy()
    np.random.default_rng(5).shuffle(shuffled)
    ds = make_dataset(emb, shuffled)
    result = mlp_cv(ds, MlpEvalConfig(seed=0))
    assert 0.4 <= result.mean["auroc"] <= 0.6


def test_mlp_cv_class_weighting_imbalanced():
    emb, labels = blobs(0, 2, 24, sep=8.0, seed=3, imbalance=[180, 20])
    ds = make_dataset(emb, labels)
    result = mlp_cv(ds, MlpEvalConfig(seed=0))
    assert result.mean["balanced_accuracy"] >= 0.95  # frozen run: 1.0


def test_mlp_cv_external_deployment():
    emb, labels = blobs(30, 2, 16, sep=8.0, seed=4)
    ext_emb, ext_labels = blobs(25, 2, 16, sep=8.0, seed=5, center_seed=4)
    ds = make_dataset(emb, labels)
    ext = make_dataset(ext_emb, ext_labels)
    result = mlp_cv(ds, MlpEvalConfig(seed=0), test_dataset=ext)
    assert result.mean["auroc"] >= 0.99


def test_mlp_cv_stratification_failure():
    emb, labels = blobs(3, 2, 8, sep=4.0, seed=6)
    ds = make_dataset(emb, labels)
    ds.folds = np.where(labels == 0, 0, 1 + np.arange(len(labels)) % 4)
    with pytest.raises(ValueError, match="stratification failure"):
        mlp_cv(ds, MlpEvalConfig(seed=0))


# ---------------------------------------------------------------------------
# Few-shot probing
# ---------------------------------------------------------------------------


def test_probe_separable_three_class():
    emb, labels = blobs(20, 3, 24, sep=8.0, seed=7)
    ds = make_dataset(emb, labels)
    result = linear_probe_fewshot(ds, ProbeConfig(shots=(5,), runs=10, seed=0))
    mean_acc, _ = result.aggregate[5]["accuracy"]
    assert mean_acc >= 0.9
    assert len(result.rows) == 10


def test_probe_k_exceeds_class_count():
    emb, labels = blobs(4, 2, 8, sep=4.0, seed=8)
    ds = make_dataset(emb, labels)
    with pytest.raises(ValueError, match="class 0 has only 4"):
        linear_probe_fewshot(ds, ProbeConfig(shots=(5,), runs=2, seed=0))


def test_probe_deterministic():
    emb, labels = blobs(10, 2, 8, sep=3.0, seed=9)
    ds = make_dataset(emb, labels)
    cfg = ProbeConfig(shots=(3, 5), runs=4, seed=11)
    r1 = linear_probe_fewshot(ds, cfg)
    r2 = linear_probe_fewshot(ds, cfg)
    assert r1.rows == r2.rows
    assert r1.aggregate == r2.aggregate


# ---------------------------------------------------------------------------
# Embedding extraction
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_trained_encoder():
    torch.manual_seed(100)
    return SlideEncoder({"fma": 24, "fmb": 40}, EncoderConfig(**TOY_ENC)).eval()


def test_extract_enc_mode_dims(small_corpus, toy_trained_encoder):
    ds = extract_embeddings(small_corpus, toy_trained_encoder, "ENC")
    assert ds.embeddings.shape == (10, 16)  # d_z = encoder d_model
    assert ds.meta["mode"] == "ENC"
    ds.validate()


def test_extract_single_fm_payload_dim(small_corpus, toy_trained_encoder):
    ds = extract_embeddings(small_corpus, toy_trained_encoder, "SINGLE_FM",
                            payload_extractor="fmb")
    assert ds.embeddings.shape == (10, 40)  # d_z = payload extractor dim


def test_extract_combined_fm_payload_dim(small_corpus, toy_trained_encoder):
    ds = extract_embeddings(small_corpus, toy_trained_encoder, "COMBINED_FM",
                            payload_extractor="fma", magnification=2.0)
    assert ds.embeddings.shape == (10, 24)
    assert ds.meta["magnification_mpp"] == 2.0


def test_extract_deterministic(small_corpus, toy_trained_encoder):
    a = extract_embeddings(small_corpus, toy_trained_encoder, "ENC")
    b = extract_embeddings(small_corpus, toy_trained_encoder, "ENC")
    assert a.embeddings.tobytes() == b.embeddings.tobytes()


def test_extract_requires_payload(small_corpus, toy_trained_encoder):
    with pytest.raises(ValueError, match="payload_extractor"):
        extract_embeddings(small_corpus, toy_trained_encoder, "SINGLE_FM")
    with pytest.raises(ValueError, match="mode"):
        extract_embeddings(small_corpus, toy_trained_encoder, "BOGUS")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def test_results_csv_schema():
    body = results_csv("nsclc", "mlp-cv", [("fold0", "auroc", 0.875)])
    lines = body.splitlines()
    assert lines[0] == "task,mode,fold_or_run,metric,value"
    assert lines[1] == "nsclc,mlp-cv,fold0,auroc,0.875"


def test_dataset_tsv_roundtrip(tmp_path):
    emb, labels = blobs(6, 2, 5, sep=2.0, seed=10)
    ds = make_dataset(emb, labels)
    path = tmp_path / "emb.tsv"
    write_dataset_tsv(ds, path)
    first = path.read_bytes()

    back = read_dataset_tsv(path)
    assert back.patient_ids == ds.patient_ids
    assert np.array_equal(back.labels, ds.labels)
    assert back.embeddings.tobytes() == ds.embeddings.tobytes()

    write_dataset_tsv(back, path)
    assert path.read_bytes() == first  # re-export bitwise stable

    header = path.read_text().splitlines()[0]
    assert len(header.split("\t")) == 2 + ds.dim
