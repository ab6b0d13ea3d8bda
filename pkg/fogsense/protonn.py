"""
ProtoNN classifier

A sparse projection W maps a feature vector into a low-dimensional space where
m prototypes B vote for classes through a score matrix Z, weighted by an RBF
kernel of width gamma. Training alternates mini-batch gradient steps on Z, B
and W, hard-thresholding each matrix to its nonzero budget after its phase.

The "PNN1" serialization is also the size metric: model_size_bytes is the
length of serialize(model).
"""

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans

from .errors import BadMagicError, ConfigError, FormatError, SchemaError, TrainingError, VersionMismatchError
from .features import FeatureMatrix, NormalizationStats
from .metrics import balanced_recall
from .models import ProtoNNHyper
from .utils import ByteReader

logger = logging.getLogger(__name__)

N_CLASSES = 2
MAGIC = b"PNN1"
VERSION = 1
HEADER = "<4sHHHHBf"
MATRIX_HEADER = "<BI"
DENSE, SPARSE = 0, 1
SPARSE_ENTRY = "<Hf"
DIGEST_BYTES = 32
SCORE_CHUNK = 2048


@dataclass(frozen=True)
class ProtoNNModel:
    W: np.ndarray  # (d_hat, D)
    B: np.ndarray  # (d_hat, m)
    Z: np.ndarray  # (L, m)
    gamma: float
    stats: Optional[NormalizationStats] = None
    schema_digest: bytes = bytes(DIGEST_BYTES)
    budgets: Tuple[Optional[int], Optional[int], Optional[int]] = (None, None, None)
    final_loss: Optional[float] = None

    @property
    def d_hat(self) -> int:
        return self.W.shape[0]

    @property
    def n_features(self) -> int:
        return self.W.shape[1]

    @property
    def n_prototypes(self) -> int:
        return self.B.shape[1]

    @property
    def n_classes(self) -> int:
        return self.Z.shape[0]


# --- Inference ---

def score(model: ProtoNNModel, x: np.ndarray) -> np.ndarray:
    """Per-class scores sum_j Z[l, j] * exp(-gamma^2 * ||W x - b_j||^2).

    Accepts one vector or a (n, D) matrix. Every reduction runs along the
    last axis of a per-row block, so a row scores the same alone or in a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[-1] != model.n_features:
        raise SchemaError(f"model expects {model.n_features} features, got {X.shape[-1]}")

    out = np.empty((X.shape[0], model.n_classes), dtype=np.float64)
    g2 = model.gamma ** 2
    prototypes = np.ascontiguousarray(model.B.T)
    for lo in range(0, X.shape[0], SCORE_CHUNK):
        xb = X[lo:lo + SCORE_CHUNK]
        projected = (xb[:, None, :] * model.W[None, :, :]).sum(axis=-1)
        d2 = np.square(projected[:, None, :] - prototypes[None, :, :]).sum(axis=-1)
        kernel = np.exp(-g2 * d2)
        out[lo:lo + SCORE_CHUNK] = (kernel[:, None, :] * model.Z[None, :, :]).sum(axis=-1)
    return out[0] if single else out


def predict(model: ProtoNNModel, x: np.ndarray) -> np.ndarray:
    """Argmax class; ties go to the lower class index (Normal)."""
    return np.argmax(score(model, x), axis=-1)


def predict_raw(model: ProtoNNModel, values: np.ndarray) -> np.ndarray:
    """Predict un-normalized rows through the model's stored (f32) stats."""
    values = np.asarray(values, dtype=np.float64)
    return predict(model, model.stats.apply(values) if model.stats is not None else values)


# --- Training ---

def hard_threshold(matrix: np.ndarray, budget: Optional[int]) -> np.ndarray:
    """Keep the `budget` largest-magnitude entries; ties keep the smaller flat index."""
    if budget is None or budget >= matrix.size:
        return matrix.copy()
    if budget < 0:
        raise ConfigError("budget", f"must be non-negative, got {budget}")
    flat = matrix.ravel()
    keep = np.argsort(-np.abs(flat), kind="stable")[:budget]
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return out.reshape(matrix.shape)


def loss_and_grads(
    W: np.ndarray,
    B: np.ndarray,
    Z: np.ndarray,
    gamma: float,
    X: np.ndarray,
    y: np.ndarray,
    sample_weight: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Squared loss sum_i c_i ||S_i - onehot(y_i)||^2 and its gradients (dW, dB, dZ)."""
    P = X @ W.T
    d2 = (
        np.square(P).sum(axis=1)[:, None]
        - 2.0 * P @ B
        + np.square(B).sum(axis=0)[None, :]
    )
    K = np.exp(-(gamma ** 2) * d2)
    S = K @ Z.T
    Y = np.eye(Z.shape[0])[y]
    R = S - Y
    if sample_weight is not None:
        R = R * sample_weight[:, None]
        loss = float(np.sum(sample_weight * np.square(S - Y).sum(axis=1)))
    else:
        loss = float(np.square(R).sum())

    dZ = 2.0 * R.T @ K
    G = -(gamma ** 2) * K * (2.0 * R @ Z)
    dB = -2.0 * (P.T @ G - B * G.sum(axis=0)[None, :])
    dP = 2.0 * (P * G.sum(axis=1)[:, None] - G @ B.T)
    dW = dP.T @ X
    return loss, dW, dB, dZ


def _class_weights(y: np.ndarray) -> np.ndarray:
    counts = np.bincount(y, minlength=N_CLASSES).astype(np.float64)
    return (y.size / (N_CLASSES * counts))[y]


def initialize(
    X: np.ndarray,
    y: np.ndarray,
    hyper: ProtoNNHyper,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Gaussian W, per-class k-means prototypes, one-hot Z, median-distance gamma."""
    D = X.shape[1]
    W = rng.normal(0.0, 1.0 / math.sqrt(D), size=(hyper.d_hat, D))
    P = X @ W.T

    centers, owners = [], []
    for cls in range(N_CLASSES):
        k = hyper.m // N_CLASSES + (1 if cls < hyper.m % N_CLASSES else 0)
        points = P[y == cls]
        if len(points) < k:
            raise TrainingError(f"class {cls} has {len(points)} window(s) for {k} prototype(s)")
        km = KMeans(n_clusters=k, n_init=10, random_state=int(rng.integers(2 ** 31 - 1)))
        km.fit(points)
        centers.append(km.cluster_centers_)
        owners.extend([cls] * k)
    B = np.concatenate(centers).T.copy()
    Z = np.eye(N_CLASSES)[owners].T.copy()

    sample = rng.choice(len(P), size=min(len(P), 1000), replace=False)
    dist = np.sqrt(np.square(P[sample][:, None, :] - B.T[None, :, :]).sum(axis=-1))
    median = float(np.median(dist))
    gamma = hyper.gamma_scale / median if median > 0 else 1.0
    return W, B, Z, gamma


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def train(
    X: np.ndarray,
    labels: np.ndarray,
    hyper: ProtoNNHyper,
    seed: int = 0,
    stats: Optional[NormalizationStats] = None,
    schema_digest: Optional[bytes] = None,
) -> ProtoNNModel:
    """Fit a ProtoNN model on a normalized training matrix.

    Parameters are rounded to f32 on return so the in-memory model scores
    exactly like its serialized form.
    """
    X = np.asarray(getattr(X, "values", X), dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if np.unique(y).size < N_CLASSES:
        raise TrainingError("training labels contain a single class")
    if hyper.d_hat > X.shape[1]:
        raise ConfigError("protonn.d_hat", f"{hyper.d_hat} exceeds the {X.shape[1]} input features")

    rng = np.random.default_rng(seed if hyper.seed is None else hyper.seed)
    W, B, Z, gamma = initialize(X, y, hyper, rng)
    weights = _class_weights(y) if hyper.class_weighting else None
    budgets = (hyper.s_w, hyper.s_b, hyper.s_z)
    W, B, Z = (hard_threshold(M, s) for M, s in zip((W, B, Z), budgets))

    n = len(y)
    loss = float("nan")
    for epoch in range(hyper.epochs):
        lr = hyper.learning_rate * hyper.lr_decay ** (epoch // hyper.lr_decay_every)
        for phase in ("Z", "B", "W"):
            order = rng.permutation(n)
            for lo in range(0, n, hyper.batch_size):
                idx = order[lo:lo + hyper.batch_size]
                bw = None if weights is None else weights[idx]
                _, dW, dB, dZ = loss_and_grads(W, B, Z, gamma, X[idx], y[idx], bw)
                step = lr / len(idx)
                if phase == "Z":
                    Z = Z - step * dZ
                elif phase == "B":
                    B = B - step * dB
                else:
                    W = W - step * dW
            if phase == "Z":
                Z = hard_threshold(Z, hyper.s_z)
            elif phase == "B":
                B = hard_threshold(B, hyper.s_b)
            else:
                W = hard_threshold(W, hyper.s_w)

        loss = loss_and_grads(W, B, Z, gamma, X, y, weights)[0]
        if not math.isfinite(loss):
            raise TrainingError("training loss diverged", epoch=epoch)
        if epoch % 25 == 0 or epoch == hyper.epochs - 1:
            logger.debug(f"epoch {epoch}: loss {loss:.4f} (lr {lr:.4g})")

    if stats is not None:
        stats = NormalizationStats(mean=_f32(stats.mean), std=_f32(stats.std))
    model = ProtoNNModel(
        W=_f32(W),
        B=_f32(B),
        Z=_f32(Z),
        gamma=float(np.float32(gamma)),
        stats=stats,
        schema_digest=schema_digest or bytes(DIGEST_BYTES),
        budgets=budgets,
    )
    final = loss_and_grads(model.W, model.B, model.Z, model.gamma, X, y, weights)[0]
    return replace(model, final_loss=final)


# --- Serialization ---

def _encode_matrix(matrix: np.ndarray) -> bytes:
    """Dense f32 or sparse (u16 flat index, f32 value) entries, whichever is smaller."""
    flat = matrix.ravel()
    nz = np.flatnonzero(flat)
    dense_len = 4 * flat.size
    sparse_len = struct.calcsize(SPARSE_ENTRY) * nz.size
    if sparse_len < dense_len and flat.size <= 0xFFFF:
        entries = np.empty(nz.size, dtype=[("index", "<u2"), ("value", "<f4")])
        entries["index"] = nz
        entries["value"] = flat[nz]
        payload = entries.tobytes()
        return struct.pack(MATRIX_HEADER, SPARSE, len(payload)) + payload
    payload = flat.astype("<f4").tobytes()
    return struct.pack(MATRIX_HEADER, DENSE, len(payload)) + payload


def _decode_matrix(reader: ByteReader, shape: Tuple[int, int]) -> np.ndarray:
    flag, length = reader.unpack(MATRIX_HEADER)
    size = shape[0] * shape[1]
    raw = reader.take(length)
    if flag == DENSE:
        if length != 4 * size:
            raise FormatError(f"PNN1: dense payload of {length} bytes for a {shape} matrix")
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if flag == SPARSE:
        entry = struct.calcsize(SPARSE_ENTRY)
        if length % entry:
            raise FormatError(f"PNN1: sparse payload length {length} is not a multiple of {entry}")
        entries = np.frombuffer(raw, dtype=[("index", "<u2"), ("value", "<f4")])
        if entries.size and int(entries["index"].max()) >= size:
            raise FormatError(f"PNN1: sparse index out of range for a {shape} matrix")
        flat = np.zeros(size, dtype=np.float64)
        flat[entries["index"].astype(np.int64)] = entries["value"]
        return flat.reshape(shape)
    raise FormatError(f"PNN1: unknown matrix encoding flag {flag}")


def serialize(model: ProtoNNModel) -> bytes:
    D = model.n_features
    parts = [
        struct.pack(HEADER, MAGIC, VERSION, model.d_hat, D, model.n_prototypes, model.n_classes, model.gamma),
        _encode_matrix(model.W),
        _encode_matrix(model.B),
        _encode_matrix(model.Z),
    ]
    stats = model.stats or NormalizationStats(mean=np.zeros(D), std=np.ones(D))
    parts.append(np.concatenate([stats.mean, stats.std]).astype("<f4").tobytes())
    parts.append(model.schema_digest)
    return b"".join(parts)


def deserialize(payload: bytes) -> ProtoNNModel:
    reader = ByteReader(payload, "PNN1 model")
    magic = reader.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {magic!r}")
    version = reader.unpack("<H")[0]
    if version != VERSION:
        raise VersionMismatchError(f"PNN1 version {version}, this build reads {VERSION}")
    d_hat, D, m, L, gamma = reader.unpack("<HHHBf")
    W = _decode_matrix(reader, (d_hat, D))
    B = _decode_matrix(reader, (d_hat, m))
    Z = _decode_matrix(reader, (L, m))
    stats = reader.array("<f4", 2 * D).astype(np.float64)
    digest = reader.take(DIGEST_BYTES)
    if reader.remaining:
        raise FormatError(f"PNN1: {reader.remaining} trailing bytes")
    return ProtoNNModel(
        W=W,
        B=B,
        Z=Z,
        gamma=float(gamma),
        stats=NormalizationStats(mean=stats[:D], std=stats[D:]),
        schema_digest=digest,
    )


def model_size_bytes(model: ProtoNNModel) -> int:
    return len(serialize(model))


def inference_scratch_bytes(model: ProtoNNModel) -> int:
    """Projected vector, kernel values and class scores as f32."""
    return 4 * (model.d_hat + model.n_prototypes + model.n_classes)


# --- Size-constrained search ---

@dataclass(frozen=True)
class SweepPoint:
    target_bytes: float
    size_bytes: int
    average_recall: float
    hyper: ProtoNNHyper
    model: ProtoNNModel


DEFAULT_GRID = {
    "d_hat": (2, 4, 6, 10),
    "m": (4, 8, 12, 20),
    "density": (1.0, 0.5, 0.25),
}


def candidate_hypers(base: ProtoNNHyper, n_features: int, grid: Optional[dict] = None) -> List[ProtoNNHyper]:
    """Grid points in (d_hat, m, density) order; density < 1 sets all three budgets."""
    grid = grid or DEFAULT_GRID
    out = []
    for d_hat, m, density in product(grid["d_hat"], grid["m"], grid["density"]):
        if d_hat > n_features:
            continue
        changes = {"d_hat": d_hat, "m": m}
        if density < 1.0:
            changes.update(
                s_w=max(1, math.ceil(density * d_hat * n_features)),
                s_b=max(1, math.ceil(density * d_hat * m)),
                s_z=max(1, math.ceil(density * N_CLASSES * m)),
            )
        else:
            changes.update(s_w=None, s_b=None, s_z=None)
        out.append(base.model_copy(update=changes))
    return out


def compress_sweep(
    train_matrix: FeatureMatrix,
    val_matrix: FeatureMatrix,
    size_grid: Sequence[float],
    base: Optional[ProtoNNHyper] = None,
    grid: Optional[dict] = None,
    seed: int = 0,
    schema_digest: Optional[bytes] = None,
    workers: int = 1,
) -> List[SweepPoint]:
    """Best validation average recall among grid models that fit each size target.

    train_matrix is normalized and carries its stats; val_matrix holds raw rows,
    scored through each model's stored stats as a saved model would score them.
    """
    targets = list(size_grid)
    if not targets:
        return []
    if any(b < a for a, b in zip(targets, targets[1:])):
        raise ConfigError("size_grid", "targets must be ascending")

    hypers = candidate_hypers(base or ProtoNNHyper(), train_matrix.values.shape[1], grid)

    def fit(hyper: ProtoNNHyper) -> Tuple[ProtoNNModel, int, float]:
        model = train(
            train_matrix.values, train_matrix.labels, hyper, seed=seed,
            stats=train_matrix.stats, schema_digest=schema_digest,
        )
        recall = balanced_recall(predict_raw(model, val_matrix.values), val_matrix.labels)
        return model, model_size_bytes(model), recall

    logger.info(f"🎯 Size sweep over {len(hypers)} ProtoNN configurations, {len(targets)} target(s)")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        fitted = list(pool.map(fit, hypers))

    points = []
    for target in targets:
        fits = [(i, f) for i, f in enumerate(fitted) if f[1] <= target]
        if not fits:
            logger.warning(f"⚠️ no ProtoNN configuration fits within {target} bytes; target skipped")
            continue
        i, (model, size, recall) = max(fits, key=lambda item: (item[1][2], -item[1][1], -item[0]))
        points.append(SweepPoint(target, size, recall, hypers[i], model))
    return points
