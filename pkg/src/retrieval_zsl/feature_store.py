"""Two-modality feature datasets: binary/CSV I/O, a synthetic generator and splits.

A bundle keeps its data as three dense arrays (labels, image features, text
features) rather than a list of records; ``DatasetBundle.instances`` gives the
record view when one is needed.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError, IoError, SplitError
from .rng import make_rng, spawn_rngs

MAGIC = b"CMF1"
VERSION = 1
_HEADER = struct.Struct("<4sIQIIII")
CSV_HEADER = "label,modality,index,values..."


@dataclass(frozen=True)
class InstanceRecord:
    image_features: np.ndarray  # (Dv,)
    text_features: np.ndarray  # (T, Dt)
    label: int


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    labels: np.ndarray  # (n,) uint32
    image: np.ndarray  # (n, Dv) float32
    text: np.ndarray  # (n, T, Dt) float32
    num_classes: int
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        image = np.ascontiguousarray(self.image, dtype=np.float32)
        text = np.ascontiguousarray(self.text, dtype=np.float32)
        if image.ndim != 2 or text.ndim != 3 or labels.ndim != 1:
            raise DataError("expected labels (n,), image (n, Dv), text (n, T, Dt)")
        n = labels.shape[0]
        if image.shape[0] != n or text.shape[0] != n:
            raise DataError("labels, image and text disagree on instance count")
        if image.shape[1] < 1 or text.shape[2] < 1 or text.shape[1] < 1:
            raise DataError("Dv, Dt and T must be positive")
        if self.num_classes < 0:
            raise DataError("num_classes must be non-negative")
        if n and int(labels.max()) >= self.num_classes:
            raise DataError(f"label {int(labels.max())} >= num_classes {self.num_classes}")
        if not (np.isfinite(image).all() and np.isfinite(text).all()):
            raise DataError("non-finite feature value")
        for arr in (labels, image, text):
            arr.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "text", text)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def Dv(self) -> int:
        return int(self.image.shape[1])

    @property
    def Dt(self) -> int:
        return int(self.text.shape[2])

    @property
    def T(self) -> int:
        return int(self.text.shape[1])

    @property
    def instances(self) -> list[InstanceRecord]:
        return [
            InstanceRecord(self.image[i], self.text[i], int(self.labels[i]))
            for i in range(self.n)
        ]

    @classmethod
    def from_records(cls, records: Sequence[InstanceRecord], num_classes: int,
                     Dv: int | None = None, Dt: int | None = None, T: int | None = None,
                     class_names=None) -> "DatasetBundle":
        if records:
            image = np.stack([np.asarray(r.image_features, dtype=np.float32) for r in records])
            texts = [np.asarray(r.text_features, dtype=np.float32) for r in records]
            if len({t.shape for t in texts}) != 1:
                raise DataError("T and Dt must be identical across a bundle")
            text = np.stack(texts)
            labels = np.array([r.label for r in records], dtype=np.int64)
            if labels.min() < 0:
                raise DataError("negative label")
        else:
            if None in (Dv, Dt, T):
                raise DataError("Dv, Dt and T are required for an empty bundle")
            image = np.zeros((0, Dv), np.float32)
            text = np.zeros((0, T, Dt), np.float32)
            labels = np.zeros(0, np.int64)
        names = tuple(class_names) if class_names is not None else None
        return cls(labels, image, text, num_classes, names)

    def subset(self, ids: Sequence[int]) -> "DatasetBundle":
        ids = np.asarray(ids, dtype=np.int64)
        return DatasetBundle(self.labels[ids], self.image[ids], self.text[ids],
                             self.num_classes, self.class_names)

    def equals(self, other: "DatasetBundle") -> bool:
        """Bit-level equality of all arrays and metadata."""
        return (
            self.num_classes == other.num_classes
            and self.labels.shape == other.labels.shape
            and self.image.shape == other.image.shape
            and self.text.shape == other.text.shape
            and self.labels.tobytes() == other.labels.tobytes()
            and self.image.tobytes() == other.image.tobytes()
            and self.text.tobytes() == other.text.tobytes()
        )


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[int, ...]
    val_seen_ids: tuple[int, ...]
    val_unseen_ids: tuple[int, ...]
    test_seen_ids: tuple[int, ...]
    test_unseen_ids: tuple[int, ...]
    seen_classes: frozenset[int]
    unseen_classes: frozenset[int]

    LISTS = ("train_ids", "val_seen_ids", "val_unseen_ids", "test_seen_ids", "test_unseen_ids")
    SEEN_LISTS = ("train_ids", "val_seen_ids", "test_seen_ids")

    def __post_init__(self):
        for name in self.LISTS:
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        object.__setattr__(self, "seen_classes", frozenset(int(c) for c in self.seen_classes))
        object.__setattr__(self, "unseen_classes", frozenset(int(c) for c in self.unseen_classes))
        if self.seen_classes & self.unseen_classes:
            raise SplitError("seen and unseen class sets overlap")
        seen_idx: set[int] = set()
        total = 0
        for name in self.LISTS:
            ids = getattr(self, name)
            seen_idx.update(ids)
            total += len(ids)
        if len(seen_idx) != total:
            raise SplitError("an instance index appears in more than one split list")

    def validate(self, bundle: DatasetBundle) -> None:
        """Check index ranges and label/block consistency against ``bundle``."""
        for name in self.LISTS:
            ids = getattr(self, name)
            if ids and (min(ids) < 0 or max(ids) >= bundle.n):
                raise SplitError(f"{name} holds an index outside [0, {bundle.n})")
            allowed = self.seen_classes if name in self.SEEN_LISTS else self.unseen_classes
            bad = {int(bundle.labels[i]) for i in ids} - allowed
            if bad:
                raise SplitError(f"{name} contains labels {sorted(bad)} outside its class block")

    def to_json(self) -> dict:
        out = {name: list(getattr(self, name)) for name in self.LISTS}
        out["seen_classes"] = sorted(self.seen_classes)
        out["unseen_classes"] = sorted(self.unseen_classes)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SplitSpec":
        try:
            return cls(*(obj[name] for name in cls.LISTS),
                       seen_classes=obj["seen_classes"], unseen_classes=obj["unseen_classes"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed split document: {exc}") from exc


def save_split(split: SplitSpec, path) -> None:
    try:
        Path(path).write_text(json.dumps(split.to_json(), sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_split(path) -> SplitSpec:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"split file is not JSON: {exc}") from exc
    return SplitSpec.from_json(obj)


# --- serialization ---------------------------------------------------------

def save_bundle(bundle: DatasetBundle, path, format: str = "binary") -> None:
    if format == "binary":
        payload = _encode_binary(bundle)
    elif format == "csv":
        payload = _encode_csv(bundle).encode("ascii")
    else:
        raise ValueError(f"unknown format {format!r}")
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_bundle(path, format: str = "binary") -> DatasetBundle:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if format == "binary":
        return _decode_binary(raw)
    if format == "csv":
        try:
            text = raw.decode("ascii")
        except UnicodeDecodeError as exc:
            raise FormatError("CSV bundle must be ASCII") from exc
        return _decode_csv(text)
    raise ValueError(f"unknown format {format!r}")


def _encode_binary(bundle: DatasetBundle) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, bundle.n, bundle.num_classes,
                          bundle.Dv, bundle.Dt, bundle.T)
    return b"".join((
        header,
        bundle.labels.astype("<u4").tobytes(),
        bundle.image.astype("<f4").tobytes(),
        bundle.text.astype("<f4").tobytes(),
    ))


def _decode_binary(raw: bytes) -> DatasetBundle:
    if len(raw) < _HEADER.size:
        raise FormatError("file shorter than CMF1 header")
    magic, version, n, num_classes, dv, dt, t = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported CMF1 version {version}")
    if dv == 0 or dt == 0 or t == 0:
        raise FormatError("Dv, Dt and T must be positive")
    expected = _HEADER.size + 4 * (n + n * dv + n * t * dt)
    if len(raw) != expected:
        raise FormatError(f"payload is {len(raw)} bytes, header implies {expected}")
    off = _HEADER.size
    labels = np.frombuffer(raw, "<u4", n, off)
    off += 4 * n
    image = np.frombuffer(raw, "<f4", n * dv, off).reshape(n, dv)
    off += 4 * n * dv
    text = np.frombuffer(raw, "<f4", n * t * dt, off).reshape(n, t, dt)
    return DatasetBundle(labels, image.astype(np.float32), text.astype(np.float32), num_classes)


def _fmt(values: Iterable[float]) -> str:
    return ",".join(f"{float(v):.9g}" for v in values)


def _encode_csv(bundle: DatasetBundle) -> str:
    # The preamble carries dimensions the row data alone cannot (empty bundles,
    # unused trailing class ids).
    lines = [f"#CMF1-CSV num_classes={bundle.num_classes} Dv={bundle.Dv} Dt={bundle.Dt} T={bundle.T}",
             CSV_HEADER]
    for i in range(bundle.n):
        y = int(bundle.labels[i])
        lines.append(f"{y},image,{i},{_fmt(bundle.image[i])}")
        for k in range(bundle.T):
            lines.append(f"{y},text,{i},{_fmt(bundle.text[i, k])}")
    return "\n".join(lines) + "\n"


def _decode_csv(text: str) -> DatasetBundle:
    lines = text.splitlines()
    if len(lines) < 2 or not lines[0].startswith("#CMF1-CSV") or lines[1] != CSV_HEADER:
        raise FormatError("missing CMF1-CSV preamble or header row")
    try:
        meta = dict(tok.split("=") for tok in lines[0].split()[1:])
        num_classes, dv, dt, t = (int(meta[k]) for k in ("num_classes", "Dv", "Dt", "T"))
    except (ValueError, KeyError) as exc:
        raise FormatError(f"malformed CSV preamble: {lines[0]!r}") from exc

    labels: list[int] = []
    image: list[list[float]] = []
    texts: list[list[list[float]]] = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split(",")
        try:
            y, modality, idx = int(parts[0]), parts[1], int(parts[2])
            values = [float(v) for v in parts[3:]]
        except (ValueError, IndexError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        if modality == "image":
            if idx != len(labels) or len(values) != dv:
                raise FormatError(f"line {lineno}: image row out of order or wrong width")
            labels.append(y)
            image.append(values)
            texts.append([])
        elif modality == "text":
            if idx != len(labels) - 1 or len(values) != dt or labels[idx] != y:
                raise FormatError(f"line {lineno}: text row does not follow its image row")
            texts[idx].append(values)
        else:
            raise FormatError(f"line {lineno}: unknown modality {modality!r}")
    if any(len(tx) != t for tx in texts):
        raise FormatError(f"every instance needs exactly T={t} text rows")
    n = len(labels)
    if any(y < 0 for y in labels):
        raise DataError("negative label")
    return DatasetBundle(
        np.array(labels, dtype=np.int64),
        np.array(image, dtype=np.float64).reshape(n, dv).astype(np.float32),
        np.array(texts, dtype=np.float64).reshape(n, t, dt).astype(np.float32),
        num_classes,
    )


# --- synthetic data --------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    num_seen: int = 8
    num_unseen: int = 4
    instances_per_class: int = 30
    Dv: int = 32
    Dt: int = 24
    T: int = 4
    latent_dim: int = 16
    noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_seen", "num_unseen", "instances_per_class", "Dv", "Dt", "T", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise ValueError("noise_sigma must be a finite non-negative number")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


def seen_partition(n: int) -> tuple[int, int, int]:
    """Per-class train/val/test counts for a seen class of ``n`` instances (60/20/20)."""
    n_train = (3 * n) // 5
    n_val = n // 5
    return n_train, n_val, n - n_train - n_val


def synth_generate(config: SynthConfig) -> tuple[DatasetBundle, SplitSpec]:
    """Gaussian class-mean mixture observed through two fixed random linear maps.

    Unseen classes alternate between validation and test by their index
    among the unseen block (even -> val, odd -> test).
    """
    c = config
    n_classes = c.num_seen + c.num_unseen
    means_rng, maps_rng, noise_rng = spawn_rngs(c.seed, 3)
    mu = means_rng.standard_normal((n_classes, c.latent_dim))
    scale = 1.0 / math.sqrt(c.latent_dim)
    a_v = maps_rng.standard_normal((c.Dv, c.latent_dim)) * scale
    a_t = maps_rng.standard_normal((c.Dt, c.latent_dim)) * scale

    m = c.instances_per_class
    labels = np.repeat(np.arange(n_classes), m)
    image = (mu @ a_v.T)[labels] + c.noise_sigma * noise_rng.standard_normal((labels.size, c.Dv))
    text = (mu @ a_t.T)[labels][:, None, :] + c.noise_sigma * noise_rng.standard_normal(
        (labels.size, c.T, c.Dt))
    bundle = DatasetBundle(labels, image.astype(np.float32), text.astype(np.float32), n_classes)

    lists: dict[str, list[int]] = {name: [] for name in SplitSpec.LISTS}
    n_train, n_val, _ = seen_partition(m)
    for y in range(n_classes):
        ids = list(range(y * m, (y + 1) * m))
        if y < c.num_seen:
            lists["train_ids"] += ids[:n_train]
            lists["val_seen_ids"] += ids[n_train:n_train + n_val]
            lists["test_seen_ids"] += ids[n_train + n_val:]
        elif (y - c.num_seen) % 2 == 0:
            lists["val_unseen_ids"] += ids
        else:
            lists["test_unseen_ids"] += ids
    split = SplitSpec(**lists, seen_classes=range(c.num_seen),
                      unseen_classes=range(c.num_seen, n_classes))
    return bundle, split


def _apportion(sizes: Sequence[int], total: int) -> list[int]:
    """Largest-remainder split of ``total`` across groups proportional to ``sizes``."""
    n = sum(sizes)
    if n == 0:
        return [0] * len(sizes)
    quotas = [total * s / n for s in sizes]
    out = [math.floor(q) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - out[i]), i))
    for i in order[: total - sum(out)]:
        out[i] += 1
    return out


def build_validation_split(bundle: DatasetBundle, seen_classes: Iterable[int],
                           unseen_val_classes: Iterable[int], seen_holdout_fraction: float,
                           seed: int, pool: Sequence[int] | None = None) -> SplitSpec:
    """Carve a seen-validation block out of the seen training instances.

    The holdout size is ``round(fraction * N)`` over the whole seen pool and is
    distributed over classes by largest remainder, so the split is stratified
    while the total stays exact. Every instance of ``unseen_val_classes``
    becomes unseen validation. ``pool`` restricts which instances count as
    seen-train (default: all instances with a seen label).
    """
    seen = frozenset(int(c) for c in seen_classes)
    unseen = frozenset(int(c) for c in unseen_val_classes)
    if seen & unseen:
        raise SplitError(f"classes {sorted(seen & unseen)} are both seen and unseen")
    if not 0 < seen_holdout_fraction < 1:
        raise SplitError("seen_holdout_fraction must lie in (0, 1)")

    labels = bundle.labels
    candidates = np.arange(bundle.n) if pool is None else np.asarray(pool, dtype=np.int64)
    seen_pool = [int(i) for i in candidates if int(labels[i]) in seen]
    by_class: dict[int, list[int]] = {}
    for i in seen_pool:
        by_class.setdefault(int(labels[i]), []).append(i)
    classes = sorted(by_class)
    total = math.floor(seen_holdout_fraction * len(seen_pool) + 0.5)
    holdout = _apportion([len(by_class[y]) for y in classes], total)

    rng = make_rng(seed)
    train, val_seen = [], []
    for y, k in zip(classes, holdout):
        members = np.array(by_class[y])
        perm = members[rng.permutation(members.size)]
        val_seen += sorted(int(i) for i in perm[:k])
        train += sorted(int(i) for i in perm[k:])
    val_unseen = [i for i in range(bundle.n) if int(labels[i]) in unseen]
    return SplitSpec(sorted(train), sorted(val_seen), val_unseen, (), (),
                     seen_classes=seen, unseen_classes=unseen)
