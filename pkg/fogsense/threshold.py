"""
Freeze-index threshold detector ("FIT1")

A window is FoG when one channel's freeze index exceeds a threshold and its
band power exceeds a floor that rejects standing still. Both thresholds are
picked on training windows from a quantile grid by average recall.
"""

import logging
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import BadMagicError, FormatError, SchemaError, TrainingError, VersionMismatchError
from .features import CHANNELS, FeatureDescriptor, FeatureKind
from .metrics import balanced_recall
from .utils import ByteReader

logger = logging.getLogger(__name__)

MAGIC = b"FIT1"
VERSION = 1
LAYOUT = "<4sHBff"


@dataclass(frozen=True)
class ThresholdDetector:
    channel: str
    fi_threshold: float
    power_threshold: float

    @property
    def descriptors(self) -> Tuple[FeatureDescriptor, FeatureDescriptor]:
        """Input columns, in order: freeze index then band power."""
        return (
            FeatureDescriptor(self.channel, FeatureKind.FREEZE_INDEX),
            FeatureDescriptor(self.channel, FeatureKind.BAND_POWER),
        )


def threshold_descriptors(channel: str) -> Tuple[FeatureDescriptor, FeatureDescriptor]:
    return ThresholdDetector(channel, 0.0, 0.0).descriptors


def predict_threshold(detector: ThresholdDetector, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    X2 = X[None, :] if X.ndim == 1 else X
    if X2.shape[1] != 2:
        raise SchemaError(f"threshold detector expects 2 features, got {X2.shape[1]}")
    out = ((X2[:, 0] > detector.fi_threshold) & (X2[:, 1] > detector.power_threshold)).astype(np.int64)
    return out[0] if X.ndim == 1 else out


def fit_threshold(X: np.ndarray, labels: np.ndarray, channel: str, quantiles: int = 40) -> ThresholdDetector:
    """Grid search over quantiles of each column; ties keep the earlier grid point."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if np.unique(y).size < 2:
        raise TrainingError("training labels contain a single class")
    levels = np.linspace(0.0, 1.0, quantiles, endpoint=False)
    fi_grid = np.unique(np.quantile(X[:, 0], levels).astype(np.float32))
    power_grid = np.unique(np.quantile(X[:, 1], levels).astype(np.float32))

    best, best_recall = (float(fi_grid[0]), float(power_grid[0])), -1.0
    for fi in fi_grid:
        above_fi = X[:, 0] > fi
        for power in power_grid:
            recall = balanced_recall(above_fi & (X[:, 1] > power), y)
            if recall > best_recall:
                best, best_recall = (float(fi), float(power)), recall
    logger.info(f"🎯 FI threshold {best[0]:.3g}, power floor {best[1]:.3g} (average recall {best_recall:.3f})")
    return ThresholdDetector(channel, best[0], best[1])


def serialize_threshold(detector: ThresholdDetector) -> bytes:
    return struct.pack(
        LAYOUT, MAGIC, VERSION, CHANNELS.index(detector.channel), detector.fi_threshold, detector.power_threshold
    )


def deserialize_threshold(payload: bytes) -> ThresholdDetector:
    reader = ByteReader(payload, "FIT1 detector")
    magic = reader.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {magic!r}")
    version = reader.unpack("<H")[0]
    if version != VERSION:
        raise VersionMismatchError(f"FIT1 version {version}, this build reads {VERSION}")
    channel, fi, power = reader.unpack("<Bff")
    if channel >= len(CHANNELS):
        raise FormatError(f"FIT1: channel index {channel} out of range")
    if reader.remaining:
        raise FormatError(f"FIT1: {reader.remaining} trailing bytes")
    return ThresholdDetector(CHANNELS[channel], float(fi), float(power))


def threshold_size_bytes(detector: ThresholdDetector) -> int:
    return struct.calcsize(LAYOUT)
