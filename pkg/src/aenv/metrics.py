"""Evaluation metrics and embedding export.

Regression tasks report RMSE / Pearson correlation / bias; the volume task
reports accuracy and macro-averaged precision/recall. Embeddings can be
dumped to CSV for external plotting, with a silhouette helper standing in
for a qualitative cluster-quality comparison.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import silhouette_score

from .autodiff import Tensor
from .dataset import DatasetManifest, RirStore, _materialize


@dataclass
class RegressionReport:
    rmse: float
    pearson_corr: float | None  # None when either vector has zero variance
    bias: float  # mean(estimate - target); positive = overestimation
    n: int
    corr_undefined: bool = False


@dataclass
class ClassificationReport:
    accuracy: float
    precision: float
    recall: float
    confusion: np.ndarray  # [true, predicted]
    n: int
    undefined_precision_classes: list[int] = field(default_factory=list)
    undefined_recall_classes: list[int] = field(default_factory=list)


def regression_metrics(est, target) -> RegressionReport:
    e = np.asarray(est, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if e.size == 0 or e.size != t.size:
        raise ValueError(f"need equal nonzero lengths, got {e.size} vs {t.size}")
    diff = e - t
    rmse = float(np.sqrt(np.mean(diff ** 2)))
    bias = float(np.mean(diff))
    if e.std() == 0.0 or t.std() == 0.0:
        return RegressionReport(rmse, None, bias, e.size, corr_undefined=True)
    corr = float(np.corrcoef(e, t)[0, 1])
    return RegressionReport(rmse, corr, bias, e.size)


def classification_metrics(pred_class, true_class,
                           n_classes: int = 2) -> ClassificationReport:
    """Accuracy plus macro precision/recall.

    A class nobody predicted has undefined precision; it enters the macro
    average as 0 and is flagged. A class absent from the truth has
    undefined recall; it is dropped from the macro average and flagged.
    """
    p = np.asarray(pred_class, dtype=int).ravel()
    t = np.asarray(true_class, dtype=int).ravel()
    if p.size == 0 or p.size != t.size:
        raise ValueError(f"need equal nonzero lengths, got {p.size} vs {t.size}")
    if p.min() < 0 or p.max() >= n_classes or t.min() < 0 or t.max() >= n_classes:
        raise ValueError("labels out of range")

    confusion = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(confusion, (t, p), 1)
    accuracy = float(np.trace(confusion) / p.size)

    precisions, recalls = [], []
    undef_p, undef_r = [], []
    for c in range(n_classes):
        tp = confusion[c, c]
        predicted = confusion[:, c].sum()
        actual = confusion[c, :].sum()
        if predicted == 0:
            undef_p.append(c)
            precisions.append(0.0)
        else:
            precisions.append(tp / predicted)
        if actual == 0:
            undef_r.append(c)
        else:
            recalls.append(tp / actual)
    if not recalls:
        raise ValueError("no class present in the truth labels")
    return ClassificationReport(
        accuracy=accuracy,
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        confusion=confusion, n=p.size,
        undefined_precision_classes=undef_p,
        undefined_recall_classes=undef_r)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def compute_embeddings(encoder, manifest: DatasetManifest, store: RirStore,
                       corpus, batch_size: int = 32,
                       cache: dict | None = None) -> np.ndarray:
    """Eval-mode embeddings for every manifest entry, in manifest order."""
    out = []
    entries = manifest.entries
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        feats = np.stack([
            _materialize(store, corpus, e.rir_id, e.source_id, cache).values
            for e in chunk])[:, None].astype(np.float32)
        out.append(encoder.forward(Tensor(feats), training=False).data)
    return np.concatenate(out, axis=0)


def export_embeddings(encoder, manifest: DatasetManifest, store: RirStore,
                      corpus, out_path, cache: dict | None = None) -> Path:
    """CSV with one row per manifest entry: labels plus the unit-norm
    embedding in columns e0..e{D-1}."""
    emb = compute_embeddings(encoder, manifest, store, corpus, cache=cache)
    out_path = Path(out_path)
    dim = emb.shape[1]
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "room_id", "rir_id", "rt60_s", "c50_db",
                    "volume_m3"] + [f"e{i}" for i in range(dim)])
        for entry, vec in zip(manifest.entries, emb):
            w.writerow([entry.sample_id, entry.room_id, entry.rir_id,
                        f"{entry.rt60_s:.6f}", f"{entry.c50_db:.6f}",
                        f"{entry.volume_m3:.6f}"]
                       + [f"{v:.8f}" for v in vec])
    return out_path


def room_silhouette(embeddings: np.ndarray, room_ids) -> float:
    """Mean Euclidean silhouette of embeddings grouped by room."""
    _, labels = np.unique(np.asarray(room_ids), return_inverse=True)
    return float(silhouette_score(embeddings, labels, metric="euclidean"))
