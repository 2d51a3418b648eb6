"""Batch retrieval and classification losses and their lambda/kappa mixture.

For a batch with cross-modal distance matrix ``D[i, j] = d(z_v[i], z_t[j])``:

    J_TR = mean_i [ D[i, i] + logsumexp_j(-D[i, j]) ]   (fix image, rank texts)
    J_IR = mean_i [ D[i, i] + logsumexp_j(-D[j, i]) ]   (fix text, rank images)

The normalizer runs over the whole batch including the matched pair.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding_model import ModelParams, distance, pairwise_distances
from .errors import ArgumentError, NumericsError, ShapeError


@dataclass(frozen=True)
class Batch:
    z_v: np.ndarray  # (B, Dz)
    z_t: np.ndarray  # (B, Dz)
    labels: np.ndarray  # (B,) head indices in [0, C)
    indices: np.ndarray | None = None

    def __post_init__(self):
        z_v = np.asarray(self.z_v, dtype=np.float64)
        z_t = np.asarray(self.z_t, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if z_v.ndim != 2 or z_v.shape != z_t.shape or z_v.shape[0] < 1:
            raise ShapeError(f"image/text embeddings must both be (B>=1, Dz), got {z_v.shape}, {z_t.shape}")
        if labels.shape != (z_v.shape[0],):
            raise ShapeError("labels must have one entry per batch row")
        object.__setattr__(self, "z_v", z_v)
        object.__setattr__(self, "z_t", z_t)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.z_v.shape[0]


@dataclass(frozen=True)
class BatchLossReport:
    j_tr: float
    j_ir: float
    j_tc: float
    j_ic: float
    total: float
    lam: float
    kappa: float


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _require_finite(*arrays) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericsError("non-finite value in loss computation")


def retrieval_probability(z_v, z_t, candidates, metric: str = "sqeuclid") -> float:
    """exp(-d(z_v, z_t)) normalised over exp(-d(z_v, c)) for c in ``candidates``."""
    if len(candidates) == 0:
        raise ArgumentError("candidate set is empty")
    target = distance(z_v, z_t, metric)
    logits = -np.array([distance(z_v, c, metric) for c in candidates])
    return float(np.exp(-target - logsumexp(logits)))


def text_retrieval_from_distances(D: np.ndarray) -> float:
    D = np.asarray(D, dtype=np.float64)
    _require_finite(D)
    return float(np.mean(np.diag(D) + logsumexp(-D, axis=1)))


def image_retrieval_from_distances(D: np.ndarray) -> float:
    D = np.asarray(D, dtype=np.float64)
    _require_finite(D)
    return float(np.mean(np.diag(D) + logsumexp(-D, axis=0)))


def text_retrieval_loss(batch: Batch, metric: str = "sqeuclid") -> float:
    _require_finite(batch.z_v, batch.z_t)
    return text_retrieval_from_distances(pairwise_distances(batch.z_v, batch.z_t, metric))


def image_retrieval_loss(batch: Batch, metric: str = "sqeuclid") -> float:
    _require_finite(batch.z_v, batch.z_t)
    return image_retrieval_from_distances(pairwise_distances(batch.z_v, batch.z_t, metric))


def classification_loss(embeddings, labels, head_W, head_b) -> float:
    """Mean softmax cross-entropy of ``head_W @ z + head_b`` against ``labels``."""
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    W = np.asarray(head_W, dtype=np.float64)
    if labels.size and (labels.min() < 0 or labels.max() >= W.shape[0]):
        raise ArgumentError(f"labels must lie in [0, {W.shape[0]})")
    logits = z @ W.T + np.asarray(head_b, dtype=np.float64)
    _require_finite(logits)
    nll = logsumexp(logits, axis=1) - logits[np.arange(labels.size), labels]
    return float(np.mean(nll))


def mix(j_tr: float, j_ir: float, j_tc: float, j_ic: float, lam: float, kappa: float) -> float:
    retrieval = lam * j_tr + (1.0 - lam) * j_ir
    return (1.0 - kappa) * retrieval + 0.5 * kappa * (j_tc + j_ic)


def check_mixing(lam: float, kappa: float) -> None:
    if not (0.0 <= lam <= 1.0 and 0.0 <= kappa <= 1.0):
        raise ArgumentError(f"lambda and kappa must lie in [0, 1], got {lam}, {kappa}")


def composite_loss(batch: Batch, params: ModelParams, lam: float, kappa: float,
                   metric: str = "sqeuclid") -> BatchLossReport:
    check_mixing(lam, kappa)
    D = pairwise_distances(batch.z_v, batch.z_t, metric)
    j_tr = text_retrieval_from_distances(D)
    j_ir = image_retrieval_from_distances(D)
    j_tc = classification_loss(batch.z_t, batch.labels, params.Wc, params.bc)
    j_ic = classification_loss(batch.z_v, batch.labels, params.Wi, params.bi)
    total = mix(j_tr, j_ir, j_tc, j_ic, lam, kappa)
    return BatchLossReport(j_tr, j_ir, j_tc, j_ic, total, lam, kappa)
