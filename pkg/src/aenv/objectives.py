"""Training objectives: the supervised contrastive loss over multiviewed
batches, plus mean-squared-error and cross-entropy for the downstream
heads. All functions build autodiff graphs and return scalar Tensors.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, logsumexp

_NEG_INF = -1e9  # excludes the self-similarity from every denominator


def supcon_loss(latents: Tensor, labels, tau: float) -> Tensor:
    """Supervised contrastive loss over a multiviewed batch.

    For each anchor i, averages -log softmax similarity over its positive
    set (same label, excluding itself) with all other batch members in the
    denominator, and sums over anchors. Similarities are inner products of
    unit-norm latents scaled by 1/tau; each row is max-shifted before
    exponentiation for stability.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    labels = np.asarray(labels)
    n = latents.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    norms = np.linalg.norm(latents.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ValueError("latents must be unit-norm")

    pos = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    counts = pos.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("positive set empty: a class has a single member")

    sims = (latents @ latents.T) * (1.0 / tau)
    masked = sims + Tensor(np.where(np.eye(n, dtype=bool), _NEG_INF, 0.0)
                           .astype(latents.dtype))
    lse = logsumexp(masked, axis=1)
    weights = (pos / counts[:, None]).astype(latents.dtype)
    mean_pos = (sims * Tensor(weights)).sum(axis=1)
    return (lse - mean_pos).sum()


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.size == 0:
        raise ValueError("empty input")
    if pred.size != target.size:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    diff = pred.reshape(pred.size) - Tensor(target.reshape(-1))
    return (diff * diff).mean()


def cross_entropy_loss(scores: Tensor, class_indices) -> Tensor:
    """Mean negative log-likelihood from pre-softmax scores, computed in
    the log-sum-exp form so a vanishing true-class probability never hits
    log(0)."""
    idx = np.asarray(class_indices, dtype=int)
    n, k = scores.shape
    if idx.shape != (n,):
        raise ValueError(f"expected {n} class indices, got {idx.shape}")
    if idx.min() < 0 or idx.max() >= k:
        raise ValueError("class index out of range")
    one_hot = np.zeros((n, k), dtype=scores.dtype)
    one_hot[np.arange(n), idx] = 1.0
    true_scores = (scores * Tensor(one_hot)).sum(axis=1)
    return (logsumexp(scores, axis=1) - true_scores).mean()
