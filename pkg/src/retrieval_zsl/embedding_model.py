"""Linear projection heads into the joint space and linear classifier heads."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import DegenerateInputError, FormatError, IoError, ShapeError
from .rng import make_rng

METRICS = ("sqeuclid", "cosine_dist")
CHECKPOINT_MAGIC = b"CMP1"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIII")


@dataclass(eq=False)
class ModelParams:
    """Weights of both projection heads and both classifier heads (float64).

    Image head: ``Wv`` (Dz, Dv), ``bv``; text head: ``Wt`` (Dz, Dt), ``bt``;
    image classifier ``Wi`` (C, Dz), ``bi``; text classifier ``Wc`` (C, Dz), ``bc``.
    """

    Wv: np.ndarray
    bv: np.ndarray
    Wt: np.ndarray
    bt: np.ndarray
    Wi: np.ndarray
    bi: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        dz = self.Wv.shape[0]
        c = self.Wi.shape[0]
        if self.Wv.ndim != 2 or self.Wt.ndim != 2 or self.Wi.ndim != 2:
            raise ShapeError("Wv, Wt and Wi must be matrices")
        expected = {
            "bv": (dz,), "Wt": (dz, self.Wt.shape[1]), "bt": (dz,),
            "Wi": (c, dz), "bi": (c,), "Wc": (c, dz), "bc": (c,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if not all(np.isfinite(a).all() for a in self.arrays()):
            raise ShapeError("parameters must be finite")

    @property
    def Dv(self) -> int:
        return self.Wv.shape[1]

    @property
    def Dt(self) -> int:
        return self.Wt.shape[1]

    @property
    def Dz(self) -> int:
        return self.Wv.shape[0]

    @property
    def C(self) -> int:
        return self.Wi.shape[0]

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.names()]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        return all(a.shape == b.shape and np.allclose(a, b, rtol=0, atol=atol)
                   for a, b in zip(self.arrays(), other.arrays()))


def init_params(Dv: int, Dt: int, Dz: int, C: int, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if min(Dv, Dt, Dz, C) < 1:
        raise ShapeError("all dimensions must be >= 1")
    rng = make_rng(seed)

    def uniform(rows, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(rows, fan_in))

    return ModelParams(
        Wv=uniform(Dz, Dv), bv=np.zeros(Dz),
        Wt=uniform(Dz, Dt), bt=np.zeros(Dz),
        Wi=uniform(C, Dz), bi=np.zeros(C),
        Wc=uniform(C, Dz), bc=np.zeros(C),
    )


def embed_image(params: ModelParams, image_features) -> np.ndarray:
    """Project one image vector (Dv,) or a batch (n, Dv) into Z."""
    x = np.asarray(image_features, dtype=np.float64)
    if x.shape[-1:] != (params.Dv,) or x.ndim not in (1, 2):
        raise ShapeError(f"image features of shape {x.shape} do not match Dv={params.Dv}")
    return x @ params.Wv.T + params.bv


def pool_text(text_features) -> np.ndarray:
    """Mean over the description axis: (T, Dt) -> (Dt,), (n, T, Dt) -> (n, Dt)."""
    t = np.asarray(text_features, dtype=np.float64)
    if t.ndim not in (2, 3) or t.shape[-2] < 1:
        raise ShapeError(f"text features need shape (T, Dt) or (n, T, Dt), got {t.shape}")
    return t.mean(axis=-2)


def embed_text(params: ModelParams, text_features) -> np.ndarray:
    """Pool the T descriptions by mean, then project. Accepts (T, Dt) or (n, T, Dt)."""
    pooled = pool_text(text_features)
    if pooled.shape[-1] != params.Dt:
        raise ShapeError(f"text feature width {pooled.shape[-1]} does not match Dt={params.Dt}")
    return pooled @ params.Wt.T + params.bt


def project_pooled_text(params: ModelParams, pooled) -> np.ndarray:
    return np.asarray(pooled, dtype=np.float64) @ params.Wt.T + params.bt


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def distance(a, b, metric: str = "sqeuclid") -> float:
    _check_metric(metric)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"embeddings of shapes {a.shape} and {b.shape} are not comparable")
    if metric == "sqeuclid":
        diff = a - b
        return float(diff @ diff)
    a_hat, b_hat = _unit_rows(a[None, :])[0], _unit_rows(b[None, :])[0]
    # Clip guards rounding that would push 1 - cos a hair below zero.
    return float(max(0.0, 1.0 - a_hat @ b_hat))


def pairwise_distances(A, B, metric: str = "sqeuclid") -> np.ndarray:
    """Matrix ``D[i, j] = d(A[i], B[j])`` for row-stacked embeddings."""
    _check_metric(metric)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ShapeError(f"cannot compare embeddings of shapes {A.shape} and {B.shape}")
    if metric == "sqeuclid":
        diff = A[:, None, :] - B[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    return np.maximum(0.0, 1.0 - _unit_rows(A) @ _unit_rows(B).T)


def _unit_rows(X: np.ndarray) -> np.ndarray:
    # Divide by the max-abs entry first so tiny vectors do not underflow to a zero norm.
    peak = np.abs(X).max(axis=1, keepdims=True)
    if (peak == 0).any():
        raise DegenerateInputError("cosine distance is undefined for a zero vector")
    X = X / peak
    return X / np.linalg.norm(X, axis=1, keepdims=True)


# --- checkpoint I/O ----------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    header = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                               params.Dv, params.Dt, params.Dz, params.C)
    body = b"".join(a.astype("<f4").tobytes() for a in params.arrays())
    try:
        with open(path, "wb") as fh:
            fh.write(header + body)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> ModelParams:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError("file shorter than CMP1 header")
    magic, version, dv, dt, dz, c = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise FormatError(f"not a CMP1 v{CHECKPOINT_VERSION} checkpoint")
    shapes = [(dz, dv), (dz,), (dz, dt), (dz,), (c, dz), (c,), (c, dz), (c,)]
    sizes = [int(np.prod(s)) for s in shapes]
    if len(raw) != _CKPT_HEADER.size + 4 * sum(sizes):
        raise FormatError("checkpoint payload size does not match its header")
    off = _CKPT_HEADER.size
    arrays = []
    for shape, size in zip(shapes, sizes):
        arrays.append(np.frombuffer(raw, "<f4", size, off).reshape(shape).astype(np.float64))
        off += 4 * size
    return ModelParams(*arrays)
