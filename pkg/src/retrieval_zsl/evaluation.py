"""GZSL metrics (u, s, H, seen/unseen confusion) and alpha / lambda / kappa sweeps."""
from __future__ import annotations

import csv
import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .embedding_model import ModelParams, embed_image, embed_text, pairwise_distances
from .errors import ArgumentError, MonotonicityError
from .feature_store import DatasetBundle, SplitSpec
from .gzsl_classifier import PrototypeTable, RescaleConfig, classify_batch, compute_prototypes
from .rng import make_rng
from .trainer import TrainConfig, train

SUBSETS = {"val": ("val_seen_ids", "val_unseen_ids"), "test": ("test_seen_ids", "test_unseen_ids")}
SWEEP_COLUMNS = ("value", "u", "s", "H", "p_unseen_as_seen", "p_seen_as_unseen",
                 "ci_low", "ci_high", "repeats", "alpha")
_Z975 = statistics.NormalDist().inv_cdf(0.975)


def harmonic_mean(u: float, s: float) -> float:
    """2us / (u + s), or 0 when both rates are 0. Scale-free (fractions or percents)."""
    if u + s == 0:
        return 0.0
    return 2.0 * u * s / (u + s)


def default_alpha_grid() -> list[float]:
    return parse_grid("0:4:0.05")


def parse_grid(spec: str) -> list[float]:
    """``start:stop:step`` inclusive of ``stop`` within half a step, or a comma list."""
    if ":" not in spec:
        return [float(v) for v in spec.split(",") if v.strip()]
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
    except ValueError as exc:
        raise ArgumentError(f"grid {spec!r} is not start:stop:step") from exc
    if not step > 0 or stop < start:
        raise ArgumentError(f"grid {spec!r} needs step > 0 and stop >= start")
    count = math.floor((stop - start) / step + 0.5) + 1
    # Round away accumulated binary noise so 0.15 prints as 0.15; stays monotone.
    return [round(start + k * step, 12) for k in range(count)]


@dataclass(frozen=True)
class GzslReport:
    u: float | None
    s: float | None
    H: float | None
    p_unseen_as_seen: float | None
    p_seen_as_unseen: float | None
    per_class: dict[int, float]
    alpha: float = 0.0
    n_seen: int = 0
    n_unseen: int = 0

    def to_json(self) -> dict:
        out = asdict(self)
        out["per_class"] = {str(k): v for k, v in sorted(self.per_class.items())}
        return out


def confusion_rates(predictions, true_labels, seen_set) -> tuple[float | None, float | None]:
    """(P[pred seen | true unseen], P[pred unseen | true seen]) per sample.

    A rate over an empty subpopulation is ``None``.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ArgumentError("predictions and labels must align")
    seen = np.array(sorted(int(c) for c in seen_set), dtype=np.int64)
    pred_seen = np.isin(pred, seen)
    true_seen = np.isin(true, seen)
    n_unseen = int((~true_seen).sum())
    n_seen = int(true_seen.sum())
    p_us = float((pred_seen & ~true_seen).sum()) / n_unseen if n_unseen else None
    p_su = float((~pred_seen & true_seen).sum()) / n_seen if n_seen else None
    return p_us, p_su


def _block_stats(pred, true, classes, wrong_block, per_class_average):
    """Accuracy and cross-block rate over one block of classes."""
    if true.size == 0:
        return None, None, {}
    per_class = {}
    cross = {}
    for y in classes:
        m = true == y
        if m.any():
            per_class[int(y)] = float(np.mean(pred[m] == y))
            cross[int(y)] = float(np.mean(wrong_block[m]))
    if per_class_average:
        acc = math.fsum(per_class.values()) / len(per_class)
        rate = math.fsum(cross.values()) / len(cross)
    else:
        acc = float(np.mean(pred == true))
        rate = float(np.mean(wrong_block))
    return acc, rate, per_class


def report_from_predictions(pred, true, seen_classes, alpha: float = 0.0,
                            per_class_average: bool = True) -> GzslReport:
    """Build a report from aligned predictions and labels.

    With per-class averaging the confusion rates are averaged per class too, so
    that ``u + p_unseen_as_seen <= 1`` holds.
    """
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    seen = np.array(sorted(int(c) for c in seen_classes), dtype=np.int64)
    true_seen = np.isin(true, seen)
    pred_seen = np.isin(pred, seen)
    s_pred, s_true = pred[true_seen], true[true_seen]
    u_pred, u_true = pred[~true_seen], true[~true_seen]
    s, p_su, pc_s = _block_stats(s_pred, s_true, np.unique(s_true), ~pred_seen[true_seen],
                                 per_class_average)
    u, p_us, pc_u = _block_stats(u_pred, u_true, np.unique(u_true), pred_seen[~true_seen],
                                 per_class_average)
    H = harmonic_mean(u, s) if u is not None and s is not None else None
    return GzslReport(u, s, H, p_us, p_su, {**pc_s, **pc_u}, float(alpha),
                      int(s_true.size), int(u_true.size))


def build_eval_table(params: ModelParams, bundle: DatasetBundle, split: SplitSpec,
                     subset: str = "test", zsl: bool = False,
                     metric: str = "sqeuclid") -> PrototypeTable:
    """Prototypes from the texts of the evaluated instances.

    Seen prototypes cover every seen class present in the subset; unseen
    prototypes cover the unseen classes present in it. ``zsl`` drops the
    seen block entirely.
    """
    seen_key, unseen_key = SUBSETS[subset]
    seen_ids = list(getattr(split, seen_key))
    unseen_ids = list(getattr(split, unseen_key))
    seen_classes = sorted({int(bundle.labels[i]) for i in seen_ids})
    unseen_classes = sorted({int(bundle.labels[i]) for i in unseen_ids})
    if zsl:
        seen_classes, seen_ids = [], []
    class_ids = seen_classes + unseen_classes
    flags = [True] * len(seen_classes) + [False] * len(unseen_classes)
    return compute_prototypes(params, bundle, class_ids, flags, seen_ids + unseen_ids, metric)


def evaluate(params: ModelParams, bundle: DatasetBundle, split: SplitSpec,
             table: PrototypeTable | None = None, alpha: float = 0.0, metric: str = "sqeuclid",
             subset: str = "test", per_class_average: bool = True, zsl: bool = False) -> GzslReport:
    """Classify the seen and unseen instances of ``subset`` and summarise."""
    if subset not in SUBSETS:
        raise ArgumentError(f"subset must be one of {sorted(SUBSETS)}")
    if table is None:
        table = build_eval_table(params, bundle, split, subset, zsl, metric)
    seen_key, unseen_key = SUBSETS[subset]
    ids = ([] if zsl else list(getattr(split, seen_key))) + list(getattr(split, unseen_key))
    true = bundle.labels[np.asarray(ids, dtype=np.int64)].astype(np.int64)
    missing = set(true.tolist()) - set(table.class_ids.tolist())
    if missing:
        raise ArgumentError(f"no prototype for classes {sorted(missing)}")
    z = embed_image(params, bundle.image[np.asarray(ids, dtype=np.int64)].reshape(len(ids), bundle.Dv))
    pred = classify_batch(z, table, RescaleConfig(alpha))
    return report_from_predictions(pred, true, split.seen_classes, alpha, per_class_average)


@dataclass
class SweepPoint:
    value: float
    u: float | None
    s: float | None
    H: float | None
    p_unseen_as_seen: float | None
    p_seen_as_unseen: float | None
    ci_low: float | None
    ci_high: float | None
    repeats: int = 1
    alpha: float | None = None
    reports: list[GzslReport] = field(default_factory=list, repr=False)


@dataclass
class SweepResult:
    param: str
    points: list[SweepPoint]
    best_index: int

    @property
    def values(self) -> list[float]:
        return [p.value for p in self.points]

    @property
    def best(self) -> SweepPoint:
        return self.points[self.best_index]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SWEEP_COLUMNS)
            for p in self.points:
                writer.writerow([_cell(getattr(p, c)) for c in SWEEP_COLUMNS])

    def to_json(self) -> dict:
        return {
            "param": self.param,
            "best_value": self.best.value,
            "best_H": self.best.H,
            "points": [{c: getattr(p, c) for c in SWEEP_COLUMNS} for p in self.points],
        }


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _argmax_h(points: Sequence[SweepPoint]) -> int:
    """Index of the largest H; ties go to the smallest grid value."""
    best = None
    for k, p in enumerate(points):
        h = -math.inf if p.H is None else p.H
        key = (h, -p.value)
        if best is None or key > best[0]:
            best = (key, k)
    return best[1]


def check_monotone(points: Sequence[SweepPoint]) -> None:
    """Raise unless p_unseen_as_seen is non-increasing and p_seen_as_unseen non-decreasing in alpha."""
    ordered = sorted(points, key=lambda p: p.value)
    for a, b in zip(ordered, ordered[1:]):
        if None not in (a.p_unseen_as_seen, b.p_unseen_as_seen) and b.p_unseen_as_seen > a.p_unseen_as_seen:
            raise MonotonicityError(f"p_unseen_as_seen rose between alpha={a.value} and {b.value}")
        if None not in (a.p_seen_as_unseen, b.p_seen_as_unseen) and b.p_seen_as_unseen < a.p_seen_as_unseen:
            raise MonotonicityError(f"p_seen_as_unseen fell between alpha={a.value} and {b.value}")


def alpha_sweep(params: ModelParams, bundle: DatasetBundle, split: SplitSpec,
                grid: Sequence[float] | None = None, metric: str = "sqeuclid",
                subset: str = "val", per_class_average: bool = True) -> SweepResult:
    """Evaluate H over an alpha grid on the validation lists; pick the H-maximising alpha."""
    grid = default_alpha_grid() if grid is None else [float(a) for a in grid]
    if not grid:
        raise ArgumentError("alpha grid is empty")
    if min(grid) < 0:
        raise ArgumentError("alpha values must be non-negative")
    table = build_eval_table(params, bundle, split, subset, metric=metric)
    points = []
    for a in grid:
        r = evaluate(params, bundle, split, table, a, metric, subset, per_class_average)
        points.append(SweepPoint(a, r.u, r.s, r.H, r.p_unseen_as_seen, r.p_seen_as_unseen,
                                 r.H, r.H, 1, a, [r]))
    check_monotone(points)
    return SweepResult("alpha", points, _argmax_h(points))


def mean_ci(values: Sequence[float]) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval; a single value is its own interval."""
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, mean, mean
    half = _Z975 * statistics.stdev(values) / math.sqrt(n)
    return mean, mean - half, mean + half


def train_and_evaluate(bundle: DatasetBundle, split: SplitSpec, config: TrainConfig,
                       alpha_grid: Sequence[float] | None = None,
                       eval_subset: str = "test") -> GzslReport:
    """Train, choose alpha on validation, report on ``eval_subset``."""
    params, _ = train(bundle, split, config)
    chosen = alpha_sweep(params, bundle, split, alpha_grid, config.metric).best.value
    return evaluate(params, bundle, split, alpha=chosen, metric=config.metric, subset=eval_subset)


def mixing_sweep(bundle: DatasetBundle, split: SplitSpec, param: str, grid: Sequence[float],
                 base_config: TrainConfig, repeats: int = 10,
                 alpha_grid: Sequence[float] | None = None, eval_subset: str = "test",
                 workers: int = 1) -> SweepResult:
    """Train one model per (grid value, repeat) and aggregate H with a 95% interval.

    Repeat ``r`` uses seed ``base_config.seed + r``. Jobs may run on a thread
    pool; results are merged in grid order so the output does not depend on
    ``workers``.
    """
    if param not in ("lambda", "kappa"):
        raise ArgumentError(f"unknown mixing parameter {param!r}")
    if repeats < 1:
        raise ArgumentError("repeats must be >= 1")
    grid = [float(v) for v in grid]
    if not grid or any(not 0 <= v <= 1 for v in grid):
        raise ArgumentError("mixing grid values must lie in [0, 1]")
    field_name = "lam" if param == "lambda" else "kappa"
    jobs = [(v, r) for v in grid for r in range(repeats)]

    def run(job):
        v, r = job
        cfg = base_config.replace(**{field_name: v, "seed": base_config.seed + r})
        return train_and_evaluate(bundle, split, cfg, alpha_grid, eval_subset)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run, jobs))
    else:
        reports = [run(j) for j in jobs]

    points = []
    for k, v in enumerate(grid):
        reps = reports[k * repeats:(k + 1) * repeats]
        points.append(_aggregate(v, reps))
    return SweepResult(param, points, _argmax_h(points))


def _aggregate(value: float, reports: list[GzslReport]) -> SweepPoint:
    def avg(name):
        vals = [getattr(r, name) for r in reports]
        return None if any(x is None for x in vals) else math.fsum(vals) / len(vals)

    hs = [r.H for r in reports]
    if any(h is None for h in hs):
        h_mean = lo = hi = None
    else:
        h_mean, lo, hi = mean_ci(hs)
    return SweepPoint(value, avg("u"), avg("s"), h_mean, avg("p_unseen_as_seen"),
                      avg("p_seen_as_unseen"), lo, hi, len(reports), avg("alpha"), reports)


def write_report(report: GzslReport, json_path=None, csv_path=None) -> None:
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if csv_path is not None:
        cols = ("alpha", "u", "s", "H", "p_unseen_as_seen", "p_seen_as_unseen", "n_seen", "n_unseen")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            writer.writerow([_cell(getattr(report, c)) for c in cols])


def retrieval_top1(params: ModelParams, bundle: DatasetBundle, ids: Sequence[int],
                   batch_size: int, metric: str = "sqeuclid", seed: int = 0,
                   batches: int = 50, match: str = "class") -> float:
    """Within-batch text-retrieval top-1 for images drawn from ``ids``.

    ``match="class"`` counts a hit when the nearest text in the batch belongs
    to the image's class; ``"instance"`` requires the image's own text.
    """
    if match not in ("class", "instance"):
        raise ArgumentError("match must be 'class' or 'instance'")
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size > ids.size:
        raise ArgumentError("batch_size exceeds the number of instances")
    rng = make_rng(seed)
    hits = total = 0
    for _ in range(batches):
        pick = ids[rng.choice(ids.size, size=batch_size, replace=False)]
        D = pairwise_distances(embed_image(params, bundle.image[pick]),
                               embed_text(params, bundle.text[pick]), metric)
        nearest = np.argmin(D, axis=1)
        if match == "instance":
            hits += int((nearest == np.arange(batch_size)).sum())
        else:
            labels = bundle.labels[pick]
            hits += int((labels[nearest] == labels).sum())
        total += batch_size
    return hits / total
