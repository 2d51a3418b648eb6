"""Nearest text-prototype classification with seen-distance rescaling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .embedding_model import METRICS, ModelParams, embed_text, pairwise_distances
from .errors import ArgumentError, EmptyClassError, ShapeError
from .feature_store import DatasetBundle


@dataclass(frozen=True, eq=False)
class PrototypeTable:
    class_ids: np.ndarray  # (K,) sorted ascending
    prototypes: np.ndarray  # (K, Dz)
    seen: np.ndarray  # (K,) bool
    metric: str = "sqeuclid"

    def __post_init__(self):
        ids = np.asarray(self.class_ids, dtype=np.int64)
        protos = np.asarray(self.prototypes, dtype=np.float64)
        seen = np.asarray(self.seen, dtype=bool)
        if protos.ndim != 2 or ids.shape != (protos.shape[0],) or seen.shape != ids.shape:
            raise ShapeError("class_ids, prototypes and seen flags must align")
        if len(set(ids.tolist())) != ids.size:
            raise ArgumentError("duplicate class id in prototype table")
        if not np.isfinite(protos).all():
            raise ArgumentError("prototype vectors must be finite")
        if self.metric not in METRICS:
            raise ArgumentError(f"unknown metric {self.metric!r}")
        order = np.argsort(ids, kind="stable")
        object.__setattr__(self, "class_ids", ids[order])
        object.__setattr__(self, "prototypes", protos[order])
        object.__setattr__(self, "seen", seen[order])

    def __len__(self) -> int:
        return int(self.class_ids.size)

    def restrict(self, keep_seen: bool = True, keep_unseen: bool = True) -> "PrototypeTable":
        mask = (self.seen & keep_seen) | (~self.seen & keep_unseen)
        return PrototypeTable(self.class_ids[mask], self.prototypes[mask], self.seen[mask], self.metric)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["class_id", "seen"] + [f"z{k}" for k in range(self.prototypes.shape[1])])
            for y, s, p in zip(self.class_ids, self.seen, self.prototypes):
                writer.writerow([int(y), int(s)] + [repr(float(v)) for v in p])


@dataclass(frozen=True)
class RescaleConfig:
    alpha: float = 0.0

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ArgumentError(f"alpha must be a finite non-negative number, got {self.alpha}")


def compute_prototypes(params: ModelParams, bundle: DatasetBundle, class_ids: Iterable[int],
                       seen_flags: Iterable[bool], instance_ids: Sequence[int] | None = None,
                       metric: str = "sqeuclid") -> PrototypeTable:
    """Mean text embedding per class over ``instance_ids`` (default: whole bundle)."""
    class_ids = [int(c) for c in class_ids]
    seen_flags = [bool(s) for s in seen_flags]
    if len(class_ids) != len(seen_flags):
        raise ArgumentError("one seen flag per class id required")
    ids = np.arange(bundle.n) if instance_ids is None else np.asarray(instance_ids, dtype=np.int64)
    labels = bundle.labels[ids]
    protos = np.zeros((len(class_ids), params.Dz))
    for k, y in enumerate(class_ids):
        members = ids[labels == y]
        if members.size == 0:
            raise EmptyClassError(f"class {y} has no text samples in the given instance set")
        protos[k] = embed_text(params, bundle.text[members]).mean(axis=0)
    return PrototypeTable(np.array(class_ids, dtype=np.int64), protos, np.array(seen_flags), metric)


def rescaled_distance(dist, is_seen, alpha: float):
    """(1 + alpha) * dist for seen prototypes, dist otherwise. Vectorises over arrays."""
    if alpha < 0:
        raise ArgumentError("alpha must be non-negative")
    dist = np.asarray(dist, dtype=np.float64)
    out = np.where(is_seen, (1.0 + alpha) * dist, dist)
    return float(out) if out.ndim == 0 else out


def _as_rescale(rescale) -> RescaleConfig:
    if isinstance(rescale, RescaleConfig):
        return rescale
    return RescaleConfig(float(rescale))


def classify_batch(embeddings, table: PrototypeTable, rescale=RescaleConfig()) -> np.ndarray:
    """Nearest-prototype class for each row; exact ties go to the smallest class id."""
    if len(table) == 0:
        raise ArgumentError("prototype table is empty")
    alpha = _as_rescale(rescale).alpha
    Z = np.asarray(embeddings, dtype=np.float64)
    if Z.size == 0:
        return np.zeros(0, dtype=np.int64)
    if Z.ndim != 2 or Z.shape[1] != table.prototypes.shape[1]:
        raise ShapeError(f"embeddings of shape {Z.shape} do not match prototype width")
    D = pairwise_distances(Z, table.prototypes, table.metric)
    D = rescaled_distance(D, table.seen[None, :], alpha)
    # argmin returns the first minimum; class_ids are sorted so that is the smallest id.
    return table.class_ids[np.argmin(D, axis=1)]


def classify(z_v, table: PrototypeTable, rescale=RescaleConfig()) -> int:
    z = np.asarray(z_v, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("classify expects a single embedding vector")
    return int(classify_batch(z[None, :], table, rescale)[0])
