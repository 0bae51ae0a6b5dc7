"""Downstream evaluation: metrics, MLP cross-validation, few-shot probing.

Two protocols over frozen patient embeddings:

* a small MLP classifier trained with 5-fold stratified cross-validation,
  each fold's best-validation-loss model deployed on a held-out cohort;
* k-shot linear probing with an L2-regularized logistic regression over
  stratified random draws.

AUROC is computed from the rank statistic (Mann-Whitney with half credit
for ties), AUPRC by step integration of the precision-recall curve; both
macro-averaged one-vs-rest for multiclass. F1 and balanced accuracy are
taken at the argmax decision.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from torch import nn

from .corpus import CorpusManifest
from .encoder import (MODE_COMBINED_FM, MODE_ENC, MODE_SINGLE_FM, MODES,
                      SlideEncoder)

METRIC_NAMES = ("auroc", "auprc", "f1", "balanced_accuracy")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _rankdata(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their mean rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_binary(y_true: np.ndarray, scores: np.ndarray) -> float:
    """AUROC as the normalized Mann-Whitney U statistic (ties get 0.5)."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    r = _rankdata(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc_binary(y_true: np.ndarray, scores: np.ndarray) -> float:
    """Area under the precision-recall curve by step integration."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    # group ties: the curve only moves at distinct thresholds
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.r_[distinct, len(s_sorted) - 1]
    tp = np.cumsum(y_sorted)[cut].astype(np.float64)
    n_at = (cut + 1).astype(np.float64)
    precision = tp / n_at
    recall = tp / n_pos
    prev_recall = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev_recall) * precision))


def _as_score_matrix(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        return np.stack([1.0 - s, s], axis=1)
    return s


def f1_score_at_argmax(y_true: np.ndarray, scores: np.ndarray) -> float:
    s = _as_score_matrix(scores)
    y = np.asarray(y_true)
    pred = s.argmax(axis=1)
    classes = np.unique(y)
    if s.shape[1] == 2 and set(classes) <= {0, 1}:
        classes = np.array([1])  # binary: F1 of the positive class
    f1s = []
    for c in classes:
        tp = np.sum((pred == c) & (y == c))
        fp = np.sum((pred == c) & (y != c))
        fn = np.sum((pred != c) & (y == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))


def balanced_accuracy_at_argmax(y_true: np.ndarray, scores: np.ndarray) -> float:
    s = _as_score_matrix(scores)
    y = np.asarray(y_true)
    pred = s.argmax(axis=1)
    recalls = [np.mean(pred[y == c] == c) for c in np.unique(y)]
    return float(np.mean(recalls))


def compute_metrics(y_true: np.ndarray, scores: np.ndarray) -> dict[str, float]:
    """The four reported metrics; one-vs-rest macro averaging for multiclass."""
    y = np.asarray(y_true)
    s = _as_score_matrix(scores)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    if s.shape[1] == 2:
        auroc = auroc_binary(y == 1, s[:, 1])
        auprc = auprc_binary(y == 1, s[:, 1])
    else:
        auroc = float(np.mean([auroc_binary(y == c, s[:, c]) for c in classes]))
        auprc = float(np.mean([auprc_binary(y == c, s[:, c]) for c in classes]))
    return {
        "auroc": auroc,
        "auprc": auprc,
        "f1": f1_score_at_argmax(y, s),
        "balanced_accuracy": balanced_accuracy_at_argmax(y, s),
    }


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def stratified_folds(labels: np.ndarray, n_folds: int = 5,
                     seed: int = 0) -> np.ndarray:
    """Fold id per sample; each class dealt round-robin after a shuffle."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % n_folds
    return folds


@dataclass
class EvalDataset:
    """Frozen per-patient embeddings with labels and fold assignment."""

    embeddings: np.ndarray  # (P, d_z) float32
    labels: np.ndarray  # (P,) int
    patient_ids: list[str]
    folds: np.ndarray  # (P,) int in [0, n_folds)
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def validate(self) -> None:
        p = len(self.patient_ids)
        if not (self.embeddings.shape[0] == self.labels.shape[0] == p
                == self.folds.shape[0]):
            raise ValueError("embeddings/labels/ids/folds length mismatch")
        if len(set(self.patient_ids)) != p:
            raise ValueError("duplicate patient ids")


def extract_embeddings(manifest: CorpusManifest, encoder: SlideEncoder,
                       mode: str, payload_extractor: str | None = None,
                       magnification: float | None = None,
                       n_folds: int = 5, fold_seed: int = 0) -> EvalDataset:
    """One deterministic embedding per patient via the named inference mode.

    Tiles are pooled over each patient's slides at the chosen magnification
    (the first declared one by default). ENC aggregates the encoded rows of
    the all-extractor average; SINGLE_FM and COMBINED_FM aggregate the raw
    rows of ``payload_extractor``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode in (MODE_SINGLE_FM, MODE_COMBINED_FM) and payload_extractor is None:
        raise ValueError(f"mode {mode} requires payload_extractor")
    mpp = manifest.magnifications[0] if magnification is None else float(magnification)

    encoder.eval()
    zs = []
    with torch.no_grad():
        for pid in manifest.patient_ids:
            if mode == MODE_SINGLE_FM:
                feats = manifest.pooled_features(pid, payload_extractor, mpp)
                z, _ = encoder.single_fm(feats, payload_extractor)
            else:
                bags = {
                    eid: manifest.pooled_features(pid, eid, mpp)
                    for eid in manifest.extractor_ids
                }
                payload = None if mode == MODE_ENC else payload_extractor
                z, _ = encoder.combined(bags, payload_extractor_id=payload)
            zs.append(z.cpu().numpy().astype(np.float32))

    labels = manifest.labels()
    ds = EvalDataset(
        embeddings=np.stack(zs, axis=0),
        labels=labels,
        patient_ids=list(manifest.patient_ids),
        folds=stratified_folds(labels, n_folds=n_folds, seed=fold_seed),
        meta={
            "mode": mode,
            "payload_extractor": payload_extractor,
            "magnification_mpp": mpp,
        },
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# MLP protocol
# ---------------------------------------------------------------------------


@dataclass
class MlpEvalConfig:
    hidden: int = 256
    dropout: float = 0.25
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 32
    batch_size: int = 16
    patience: int = 8
    pct_start: float = 0.3
    n_folds: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.n_folds < 2:
            raise ValueError(f"n_folds must be >= 2, got {self.n_folds}")


class _MlpClassifier(nn.Module):
    def __init__(self, d_in: int, hidden: int, n_classes: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_in, hidden),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, n_classes),
        )

    def forward(self, x):
        return self.net(x)


@dataclass
class CvResult:
    per_fold: list[dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]


def _aggregate(rows: list[dict[str, float]]) -> tuple[dict, dict]:
    keys = rows[0].keys()
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    std = {k: float(np.std([r[k] for r in rows])) for k in keys}
    return mean, std


def mlp_cv(dataset: EvalDataset, cfg: MlpEvalConfig,
           test_dataset: EvalDataset | None = None) -> CvResult:
    """Stratified k-fold MLP protocol.

    Per fold: train on the other folds with early stopping and best-model
    selection on that fold's validation loss, then deploy the selected
    model on ``test_dataset`` (the external cohort). Without an external
    cohort the fold's own validation split is scored instead.
    """
    cfg.validate()
    dataset.validate()
    n_classes = dataset.n_classes
    x_all = torch.from_numpy(dataset.embeddings.astype(np.float32))
    y_all = torch.from_numpy(dataset.labels.astype(np.int64))

    rows = []
    for fold in range(cfg.n_folds):
        val_mask = dataset.folds == fold
        train_mask = ~val_mask
        if not val_mask.any():
            raise ValueError(
                f"stratification failure: fold {fold} has no validation samples"
            )
        y_train = dataset.labels[train_mask]
        present = np.unique(y_train)
        if len(present) < n_classes:
            missing = sorted(set(range(n_classes)) - set(present.tolist()))
            raise ValueError(
                f"stratification failure: fold {fold} training split is "
                f"missing class(es) {missing}"
            )
        if test_dataset is None and len(np.unique(dataset.labels[val_mask])) < 2:
            raise ValueError(
                f"stratification failure: fold {fold} validation split has "
                f"fewer than two classes to score"
            )

        torch.manual_seed(cfg.seed + fold)
        model = _MlpClassifier(dataset.dim, cfg.hidden, n_classes, cfg.dropout)

        counts = np.bincount(y_train, minlength=n_classes).astype(np.float64)
        weights = counts.sum() / (n_classes * np.maximum(counts, 1.0))
        criterion = nn.CrossEntropyLoss(weight=torch.tensor(weights, dtype=torch.float32))

        opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                weight_decay=cfg.weight_decay)
        x_tr, y_tr = x_all[train_mask], y_all[train_mask]
        x_va, y_va = x_all[val_mask], y_all[val_mask]
        n_tr = len(y_tr)
        steps_per_epoch = max(1, (n_tr + cfg.batch_size - 1) // cfg.batch_size)
        sched = torch.optim.lr_scheduler.OneCycleLR(
            opt, max_lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch,
            pct_start=cfg.pct_start,
        )

        gen = torch.Generator().manual_seed(cfg.seed + 1000 + fold)
        best_val = float("inf")
        best_state = {k: v.clone() for k, v in model.state_dict().items()}
        stale = 0
        for _epoch in range(cfg.epochs):
            model.train()
            perm = torch.randperm(n_tr, generator=gen)
            for start in range(0, n_tr, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                opt.zero_grad()
                loss = criterion(model(x_tr[idx]), y_tr[idx])
                loss.backward()
                opt.step()
                sched.step()
            model.eval()
            with torch.no_grad():
                val_loss = float(criterion(model(x_va), y_va))
            if val_loss < best_val - 1e-8:
                best_val = val_loss
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

        model.load_state_dict(best_state)
        model.eval()
        if test_dataset is not None:
            x_te = torch.from_numpy(test_dataset.embeddings.astype(np.float32))
            y_te = test_dataset.labels
        else:
            x_te, y_te = x_va, dataset.labels[val_mask]
        with torch.no_grad():
            probs = torch.softmax(model(x_te), dim=1).numpy()
        rows.append(compute_metrics(y_te, probs))

    mean, std = _aggregate(rows)
    return CvResult(per_fold=rows, mean=mean, std=std)


# ---------------------------------------------------------------------------
# Few-shot linear probing
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    shots: tuple[int, ...] = (5, 10, 25)
    runs: int = 10
    c: float = 1.0
    max_iter: int = 10000
    seed: int = 0

    def validate(self) -> None:
        if any(k < 1 for k in self.shots):
            raise ValueError(f"shots must be >= 1, got {self.shots}")
        if self.runs < 1:
            raise ValueError(f"runs must be >= 1, got {self.runs}")


@dataclass
class ProbeResult:
    rows: list[dict]  # per (k, run): metrics + accuracy
    aggregate: dict[int, dict[str, tuple[float, float]]]  # k -> metric -> (mean, std)


def linear_probe_fewshot(dataset: EvalDataset, cfg: ProbeConfig) -> ProbeResult:
    """k-shot logistic-regression probing with stratified random draws.

    For each k and run, k patients per class are drawn to fit the probe and
    every remaining patient is scored. Deterministic given the seed.
    """
    cfg.validate()
    dataset.validate()
    labels = dataset.labels
    classes = np.unique(labels)

    rows = []
    for k in cfg.shots:
        for c in classes:
            available = int(np.sum(labels == c))
            if available < k:
                raise ValueError(
                    f"class {int(c)} has only {available} patients, "
                    f"cannot draw k={k} shots"
                )
        for run in range(cfg.runs):
            rng = np.random.default_rng((cfg.seed, k, run))
            train_idx = []
            for c in classes:
                idx = np.nonzero(labels == c)[0]
                train_idx.extend(rng.choice(idx, size=k, replace=False))
            train_idx = np.sort(np.array(train_idx))
            test_mask = np.ones(len(labels), dtype=bool)
            test_mask[train_idx] = False
            if not test_mask.any():
                raise ValueError(f"k={k} leaves no held-out patients to score")

            clf = LogisticRegression(
                C=cfg.c, solver="lbfgs", max_iter=cfg.max_iter,
                class_weight="balanced",
            )
            clf.fit(dataset.embeddings[train_idx], labels[train_idx])
            probs = clf.predict_proba(dataset.embeddings[test_mask])
            y_te = labels[test_mask]
            row = {"k": int(k), "run": run,
                   "accuracy": float(np.mean(probs.argmax(axis=1) == y_te))}
            row.update(compute_metrics(y_te, probs))
            rows.append(row)

    aggregate: dict[int, dict[str, tuple[float, float]]] = {}
    for k in cfg.shots:
        sub = [r for r in rows if r["k"] == k]
        aggregate[int(k)] = {
            m: (float(np.mean([r[m] for r in sub])),
                float(np.std([r[m] for r in sub])))
            for m in ("accuracy", *METRIC_NAMES)
        }
    return ProbeResult(rows=rows, aggregate=aggregate)


# ---------------------------------------------------------------------------
# Result rendering
# ---------------------------------------------------------------------------


def results_csv(task: str, mode: str, rows: list[tuple[str, str, float]]) -> str:
    """CSV body with schema task,mode,fold_or_run,metric,value."""
    buf = io.StringIO()
    buf.write("task,mode,fold_or_run,metric,value\n")
    for fold_or_run, metric, value in rows:
        buf.write(f"{task},{mode},{fold_or_run},{metric},{repr(float(value))}\n")
    return buf.getvalue()


def cv_result_rows(result: CvResult) -> list[tuple[str, str, float]]:
    rows = []
    for i, fold in enumerate(result.per_fold):
        for m, v in fold.items():
            rows.append((f"fold{i}", m, v))
    for m in result.mean:
        rows.append(("mean", m, result.mean[m]))
        rows.append(("std", m, result.std[m]))
    return rows


def probe_result_rows(result: ProbeResult) -> list[tuple[str, str, float]]:
    rows = []
    for r in result.rows:
        for m in ("accuracy", *METRIC_NAMES):
            rows.append((f"k{r['k']}_run{r['run']}", m, r[m]))
    for k, agg in result.aggregate.items():
        for m, (mean, std) in agg.items():
            rows.append((f"k{k}_mean", m, mean))
            rows.append((f"k{k}_std", m, std))
    return rows


def mean_std_table(title: str, stats: dict[str, tuple[float, float]]) -> str:
    """Human-readable table using the mean_{std} subscript convention."""
    lines = [title]
    width = max(len(m) for m in stats)
    for m, (mean, std) in stats.items():
        lines.append(f"  {m:<{width}}  {100 * mean:.1f}_{{{100 * std:.1f}}}")
    return "\n".join(lines)


def write_dataset_tsv(dataset: EvalDataset, path: str | Path) -> None:
    """TSV dump: patient_id, label, then the embedding coordinates."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        cols = "\t".join(f"z{i:03d}" for i in range(dataset.dim))
        fh.write(f"patient_id\tlabel\t{cols}\n")
        for i, pid in enumerate(dataset.patient_ids):
            coords = "\t".join(repr(float(v)) for v in dataset.embeddings[i])
            fh.write(f"{pid}\t{int(dataset.labels[i])}\t{coords}\n")


def read_dataset_tsv(path: str | Path, n_folds: int = 5,
                     fold_seed: int = 0) -> EvalDataset:
    """Inverse of write_dataset_tsv (fold assignment is recomputed)."""
    pids, labels, rows = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("patient_id\tlabel\t"):
            raise ValueError(f"{path}: not an embedding TSV")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            pids.append(parts[0])
            labels.append(int(parts[1]))
            rows.append([float(v) for v in parts[2:]])
    labels = np.array(labels, dtype=np.int64)
    ds = EvalDataset(
        embeddings=np.array(rows, dtype=np.float32),
        labels=labels,
        patient_ids=pids,
        folds=stratified_folds(labels, n_folds=n_folds, seed=fold_seed),
    )
    ds.validate()
    return ds
