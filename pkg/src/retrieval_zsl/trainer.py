"""Mini-batch SGD on the composite objective with hand-derived gradients."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .embedding_model import (METRICS, ModelParams, init_params, pairwise_distances, pool_text,
                              project_pooled_text)
from .errors import ArgumentError, NumericsError, ShapeError
from .feature_store import DatasetBundle, SplitSpec
from .losses import (Batch, BatchLossReport, check_mixing, classification_loss, composite_loss,
                     image_retrieval_from_distances, mix, softmax, text_retrieval_from_distances)
from .rng import spawn_rngs

LOG_COLUMNS = ("step", "lr", "j_tr", "j_ir", "j_tc", "j_ic", "total")

# Gradients share the parameter layout; keeping one class avoids a parallel
# set of shape checks.
GradientSet = ModelParams


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 3000
    lr: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 1500
    lam: float = 0.5
    kappa: float = 0.5
    metric: str = "sqeuclid"
    embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.steps < 0:
            raise ArgumentError("steps must be >= 0")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ArgumentError("lr must be a positive finite number")
        if not self.lr_decay_factor > 0:
            raise ArgumentError("lr_decay_factor must be positive")
        if self.lr_decay_every < 1:
            raise ArgumentError("lr_decay_every must be >= 1")
        if self.embed_dim < 1:
            raise ArgumentError("embed_dim must be >= 1")
        if self.metric not in METRICS:
            raise ArgumentError(f"metric must be one of {METRICS}")
        check_mixing(self.lam, self.kappa)

    def replace(self, **changes) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainConfig(**values)


@dataclass
class RawBatch:
    """Raw features for one batch: image (B, Dv), pooled text (B, Dt), head labels (B,)."""

    image: np.ndarray
    text: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        if self.text.ndim == 3:
            self.text = pool_text(self.text)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image.ndim != 2 or self.text.ndim != 2 or self.image.shape[0] != self.text.shape[0]:
            raise ShapeError("image and text features must share the batch dimension")
        if self.labels.shape != (self.image.shape[0],):
            raise ShapeError("one label per batch row required")


def _distance_grads(z_v, z_t, G, metric):
    """Backpropagate dJ/dD = G through D[i, j] = d(z_v[i], z_t[j])."""
    if metric == "sqeuclid":
        # dD/dz_v[i] = 2 (z_v[i] - z_t[j]); dD/dz_t[j] = -2 (z_v[i] - z_t[j])
        gz_v = 2.0 * (G.sum(axis=1)[:, None] * z_v - G @ z_t)
        gz_t = 2.0 * (G.sum(axis=0)[:, None] * z_t - G.T @ z_v)
        return gz_v, gz_t
    na = np.linalg.norm(z_v, axis=1)
    nb = np.linalg.norm(z_t, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise NumericsError("zero embedding under cosine distance")
    a_hat = z_v / na[:, None]
    b_hat = z_t / nb[:, None]
    cos = a_hat @ b_hat.T
    gc = -G  # D = 1 - cos
    gz_v = (gc @ b_hat - (gc * cos).sum(axis=1)[:, None] * a_hat) / na[:, None]
    gz_t = (gc.T @ a_hat - (gc * cos).sum(axis=0)[:, None] * b_hat) / nb[:, None]
    return gz_v, gz_t


def _classifier_grads(z, labels, W, b, weight):
    """Gradient of ``weight * mean CE(softmax(W z + b), y)`` w.r.t. z, W, b."""
    B = z.shape[0]
    p = softmax(z @ W.T + b, axis=1)
    p[np.arange(B), labels] -= 1.0
    g_logits = p * (weight / B)
    return g_logits @ W, g_logits.T @ z, g_logits.sum(axis=0)


def backward(raw: RawBatch, params: ModelParams, lam: float, kappa: float,
             metric: str = "sqeuclid") -> tuple[BatchLossReport, GradientSet]:
    """Composite loss on ``raw`` and its gradient w.r.t. every parameter."""
    check_mixing(lam, kappa)
    if raw.labels.size and (raw.labels.min() < 0 or raw.labels.max() >= params.C):
        raise ArgumentError(f"labels must lie in [0, {params.C})")
    z_v = raw.image @ params.Wv.T + params.bv
    z_t = project_pooled_text(params, raw.text)
    if not (np.isfinite(z_v).all() and np.isfinite(z_t).all()):
        raise NumericsError("non-finite embedding")
    D = pairwise_distances(z_v, z_t, metric)
    j_tr = text_retrieval_from_distances(D)
    j_ir = image_retrieval_from_distances(D)
    j_tc = classification_loss(z_t, raw.labels, params.Wc, params.bc)
    j_ic = classification_loss(z_v, raw.labels, params.Wi, params.bi)
    total = mix(j_tr, j_ir, j_tc, j_ic, lam, kappa)
    report = BatchLossReport(j_tr, j_ir, j_tc, j_ic, total, lam, kappa)

    B = z_v.shape[0]
    eye = np.eye(B)
    p_rows = softmax(-D, axis=1)  # text retrieval: normalise over texts j
    p_cols = softmax(-D, axis=0)  # image retrieval: normalise over images j
    G = (1.0 - kappa) / B * (lam * (eye - p_rows) + (1.0 - lam) * (eye - p_cols))
    gz_v, gz_t = _distance_grads(z_v, z_t, G, metric)

    w_cls = 0.5 * kappa
    gzi, gWi, gbi = _classifier_grads(z_v, raw.labels, params.Wi, params.bi, w_cls)
    gzc, gWc, gbc = _classifier_grads(z_t, raw.labels, params.Wc, params.bc, w_cls)
    gz_v = gz_v + gzi
    gz_t = gz_t + gzc

    try:
        grads = GradientSet(
            Wv=gz_v.T @ raw.image, bv=gz_v.sum(axis=0),
            Wt=gz_t.T @ raw.text, bt=gz_t.sum(axis=0),
            Wi=gWi, bi=gbi, Wc=gWc, bc=gbc,
        )
    except ShapeError as exc:  # raised for non-finite entries
        raise NumericsError(f"non-finite gradient: {exc}") from exc
    return report, grads


def sgd_step(params: ModelParams, grads: GradientSet, lr: float) -> ModelParams:
    if [a.shape for a in params.arrays()] != [g.shape for g in grads.arrays()]:
        raise ShapeError("gradient shapes do not match parameters")
    return ModelParams(*(p - lr * g for p, g in zip(params.arrays(), grads.arrays())))


def head_labels(labels: np.ndarray, seen_classes) -> np.ndarray:
    """Map class ids to classifier-head rows (position in sorted seen classes)."""
    order = sorted(seen_classes)
    lookup = {c: k for k, c in enumerate(order)}
    try:
        return np.array([lookup[int(y)] for y in labels], dtype=np.int64)
    except KeyError as exc:
        raise ArgumentError(f"training label {exc.args[0]} is not a seen class") from None


@dataclass
class TrainLog:
    rows: list[tuple[int, float, BatchLossReport]] = field(default_factory=list)

    def append(self, step: int, lr: float, report: BatchLossReport) -> None:
        self.rows.append((step, lr, report))

    def totals(self) -> list[float]:
        return [r.total for _, _, r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for step, lr, r in self.rows:
                writer.writerow([step, repr(lr), repr(r.j_tr), repr(r.j_ir),
                                 repr(r.j_tc), repr(r.j_ic), repr(r.total)])


def train(bundle: DatasetBundle, split: SplitSpec, config: TrainConfig,
          train_ids=None) -> tuple[ModelParams, TrainLog]:
    """Run ``config.steps`` SGD iterations on fresh uniform batches from the train list.

    ``train_ids`` overrides ``split.train_ids`` (e.g. to train on train+val_seen).
    """
    ids = np.asarray(split.train_ids if train_ids is None else train_ids, dtype=np.int64)
    if ids.size == 0:
        raise ArgumentError("train split is empty")
    if config.batch_size > ids.size:
        raise ArgumentError(f"batch_size {config.batch_size} exceeds train size {ids.size}")
    labels = head_labels(bundle.labels[ids], split.seen_classes)
    image = bundle.image[ids].astype(np.float64)
    text = pool_text(bundle.text[ids])

    init_rng, batch_rng = spawn_rngs(config.seed, 2)
    params = init_params(bundle.Dv, bundle.Dt, config.embed_dim, len(split.seen_classes),
                         seed=int(init_rng.integers(2**63)))
    log = TrainLog()
    lr = config.lr
    for step in range(config.steps):
        if step and step % config.lr_decay_every == 0:
            lr *= config.lr_decay_factor
        pick = batch_rng.choice(ids.size, size=config.batch_size, replace=False)
        raw = RawBatch(image[pick], text[pick], labels[pick])
        report, grads = backward(raw, params, config.lam, config.kappa, config.metric)
        log.append(step, lr, report)
        params = sgd_step(params, grads, lr)
    return params, log


# --- finite-difference verification -----------------------------------------

@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())


def numeric_gradient(raw: RawBatch, params: ModelParams, lam: float, kappa: float,
                     metric: str = "sqeuclid", h: float = 1e-4) -> GradientSet:
    """Central differences of the composite loss, one parameter entry at a time."""
    out = []
    for name in ModelParams.names():
        base = getattr(params, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            hi = params.copy()
            getattr(hi, name)[idx] += h
            lo = params.copy()
            getattr(lo, name)[idx] -= h
            f_hi = _loss_only(raw, hi, lam, kappa, metric)
            f_lo = _loss_only(raw, lo, lam, kappa, metric)
            g[idx] = (f_hi - f_lo) / (2 * h)
        out.append(g)
    return GradientSet(*out)


def _loss_only(raw, params, lam, kappa, metric) -> float:
    z_v = raw.image @ params.Wv.T + params.bv
    z_t = project_pooled_text(params, raw.text)
    return composite_loss(Batch(z_v, z_t, raw.labels), params, lam, kappa, metric).total


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by zero."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(raw: RawBatch, params: ModelParams, lam: float, kappa: float,
              metric: str = "sqeuclid", h: float = 1e-4, tolerance: float = 1e-4,
              perturb: float = 0.0) -> GradCheckResult:
    """Compare ``backward`` against central differences per parameter block.

    ``perturb`` adds a constant to every analytic gradient entry; it exists so
    the check itself can be shown to fail.
    """
    _, analytic = backward(raw, params, lam, kappa, metric)
    numeric = numeric_gradient(raw, params, lam, kappa, metric, h)
    errors = {}
    for name in ModelParams.names():
        a = getattr(analytic, name) + perturb
        n = getattr(numeric, name)
        errors[name] = float(relative_error(a, n).max()) if a.size else 0.0
    return GradCheckResult(errors, tolerance)


def gradcheck_fixture(B: int = 4, Dv: int = 6, Dt: int = 5, Dz: int = 8, C: int = 3,
                      T: int = 2, seed: int = 0) -> tuple[RawBatch, ModelParams]:
    """Random raw batch and parameters with non-zero biases."""
    data_rng, param_rng = spawn_rngs(seed, 2)
    raw = RawBatch(
        data_rng.standard_normal((B, Dv)),
        data_rng.standard_normal((B, T, Dt)),
        data_rng.integers(0, C, size=B),
    )
    base = init_params(Dv, Dt, Dz, C, seed=int(param_rng.integers(2**63)))
    params = ModelParams(*(a + 0.1 * param_rng.standard_normal(a.shape) for a in base.arrays()))
    return raw, params
