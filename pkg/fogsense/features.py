"""
Feature Extraction Engine

Windowing of binarized streams, the ten per-channel window features (five
time-domain, five spectral), feature-matrix assembly, data-driven subset
selection and z-score normalization.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import fft
from scipy.special import entr
from sklearn.metrics import mutual_info_score

from .errors import ConfigError, DataError, FeatureError, SchemaError
from .ingest import BinaryStream, Cohort, assert_no_excluded, binarize
from .models import CHANNEL_NAMES, SENSOR_NAMES
from .utils import array_digest, sha256_hex

logger = logging.getLogger(__name__)

CHANNELS = CHANNEL_NAMES
SENSORS: Dict[str, Tuple[str, ...]] = {
    name: CHANNELS[3 * i:3 * i + 3] for i, name in enumerate(SENSOR_NAMES)
}

LOCOMOTOR_BAND = (0.5, 3.0)
FREEZE_BAND = (3.0, 8.0)
FI_EPS = 1e-12
FI_MAX = 1e6
STD_FLOOR = 1e-9
MI_BINS = 16


class FeatureKind(str, Enum):
    MEAN = "Mean"
    STD = "Std"
    VAR = "Var"
    RMS = "RMS"
    MAV = "MAV"
    ENTROPY = "Entropy"
    ENERGY = "Energy"
    PEAK_FREQ = "PeakFreq"
    FREEZE_INDEX = "FreezeIndex"
    BAND_POWER = "BandPower"


ALL_KINDS = tuple(FeatureKind)
TIME_KINDS = ALL_KINDS[:5]
FREQ_KINDS = ALL_KINDS[5:]


@dataclass(frozen=True)
class FeatureDescriptor:
    channel: str
    kind: FeatureKind

    @property
    def name(self) -> str:
        return f"{self.channel}.{self.kind.value}"

    @property
    def sort_key(self) -> Tuple[int, int]:
        return CHANNELS.index(self.channel), ALL_KINDS.index(self.kind)

    @classmethod
    def from_name(cls, name: str) -> "FeatureDescriptor":
        channel, _, kind = name.strip().partition(".")
        if channel not in CHANNELS:
            raise SchemaError(f"unknown channel in feature name {name!r}")
        try:
            return cls(channel, FeatureKind(kind))
        except ValueError:
            raise SchemaError(f"unknown feature kind in feature name {name!r}") from None


def descriptor_grid(channels: Iterable[str], kinds: Iterable[FeatureKind]) -> Tuple[FeatureDescriptor, ...]:
    """Channel-major grid in canonical channel and kind order."""
    channels, kinds = set(channels), set(kinds)
    return tuple(
        FeatureDescriptor(c, k) for c in CHANNELS if c in channels for k in ALL_KINDS if k in kinds
    )


F_D = descriptor_grid(CHANNELS, ALL_KINDS)
F_TD = descriptor_grid(CHANNELS, TIME_KINDS)


# --- Windows ---

@dataclass(frozen=True)
class Window:
    samples: np.ndarray  # (9, w*fs), milli-g
    w: int
    fs: int
    label: int
    subject_id: Optional[int]
    start_ts: int


@dataclass(frozen=True)
class WindowSet:
    """Windows as offsets into a pooled (N, 9) float32 sample table.

    Overlapping windows share storage; `batch` materializes (b, 9, L) copies.
    """

    samples: np.ndarray
    starts: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    start_ts: np.ndarray
    w: int
    fs: int

    @property
    def length(self) -> int:
        return self.w * self.fs

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i: int) -> Window:
        return Window(
            samples=self.batch(np.array([i]))[0],
            w=self.w,
            fs=self.fs,
            label=int(self.labels[i]),
            subject_id=int(self.subject_ids[i]),
            start_ts=int(self.start_ts[i]),
        )

    def take(self, idx: np.ndarray) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            starts=self.starts[idx],
            labels=self.labels[idx],
            subject_ids=self.subject_ids[idx],
            start_ts=self.start_ts[idx],
        )

    def batch(self, idx: Optional[np.ndarray] = None) -> np.ndarray:
        starts = self.starts if idx is None else self.starts[np.asarray(idx, dtype=np.int64)]
        gathered = self.samples[starts[:, None] + np.arange(self.length)[None, :]]
        return np.ascontiguousarray(gathered.transpose(0, 2, 1), dtype=np.float64)

    def digest(self) -> str:
        return array_digest(self.samples, self.starts, self.labels, self.subject_ids, self.start_ts)

    @classmethod
    def concat(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        if not parts:
            raise DataError("no windows to concatenate")
        w, fs = parts[0].w, parts[0].fs
        if any(p.w != w or p.fs != fs for p in parts):
            raise SchemaError("cannot concatenate window sets of different w/fs")
        offsets = np.cumsum([0] + [len(p.samples) for p in parts[:-1]])
        return cls(
            samples=np.concatenate([p.samples for p in parts]),
            starts=np.concatenate([p.starts + off for p, off in zip(parts, offsets)]),
            labels=np.concatenate([p.labels for p in parts]),
            subject_ids=np.concatenate([p.subject_ids for p in parts]),
            start_ts=np.concatenate([p.start_ts for p in parts]),
            w=w,
            fs=fs,
        )


def window_labels(fog_counts: np.ndarray, length: int, label_rule: str = "majority") -> np.ndarray:
    """Majority rule: FoG when at least half the samples are FoG (ties go to FoG)."""
    if label_rule == "majority":
        return (2 * fog_counts >= length).astype(np.int8)
    if label_rule == "any":
        return (fog_counts > 0).astype(np.int8)
    raise ConfigError("label_rule", f"unknown label rule {label_rule!r}")


def make_windows(
    samples: BinaryStream,
    w: int,
    fs: int = 64,
    stride: int = 32,
    label_rule: str = "majority",
) -> WindowSet:
    """Slide a w*fs window over each contiguous segment; short segments yield nothing."""
    if stride < 1:
        raise ConfigError("stride", f"must be at least 1 sample, got {stride}")
    length = w * fs
    cumulative = np.concatenate(([0], np.cumsum(samples.labels, dtype=np.int64)))
    starts = []
    for seg in samples.segments():
        n = seg.stop - seg.start
        if n < length:
            continue
        starts.append(seg.start + np.arange(0, n - length + 1, stride, dtype=np.int64))
    starts_arr = np.concatenate(starts) if starts else np.zeros(0, dtype=np.int64)
    fog_counts = cumulative[starts_arr + length] - cumulative[starts_arr]
    subject = -1 if samples.subject_id is None else samples.subject_id
    return WindowSet(
        samples=np.asarray(samples.accel, dtype=np.float32),
        starts=starts_arr,
        labels=window_labels(fog_counts, length, label_rule),
        subject_ids=np.full(len(starts_arr), subject, dtype=np.int32),
        start_ts=samples.timestamps[starts_arr].astype(np.int64),
        w=w,
        fs=fs,
    )


def window_cohort(
    cohort: Cohort,
    w: int,
    fs: int = 64,
    stride: int = 32,
    label_rule: str = "majority",
    include_subjects: Optional[Iterable[int]] = None,
) -> WindowSet:
    """Windows of every included subject, in (subject, run) order."""
    include = set(include_subjects) if include_subjects else None
    parts = []
    for stream in cohort.streams():
        if include is not None and stream.subject_id not in include:
            continue
        parts.append(make_windows(binarize(stream), w, fs, stride, label_rule))
    windows = WindowSet.concat(parts)
    assert_no_excluded(windows.subject_ids, cohort.excluded)
    logger.info(
        f"🪟 {len(windows)} windows (w={w}s, stride={stride}), "
        f"{int(windows.labels.sum())} FoG"
    )
    return windows


# --- Per-window features ---

class TimeFeatures(NamedTuple):
    mean: np.ndarray
    std: np.ndarray
    var: np.ndarray
    rms: np.ndarray
    mav: np.ndarray


class Spectrum(NamedTuple):
    freqs: np.ndarray
    power: np.ndarray
    n: int
    fs: float


class FreqFeatures(NamedTuple):
    entropy: np.ndarray
    energy: np.ndarray
    peak_freq: np.ndarray
    freeze_index: np.ndarray
    band_power: np.ndarray


def time_features(channel_samples: np.ndarray) -> TimeFeatures:
    """Population statistics along the last axis."""
    x = np.asarray(channel_samples, dtype=np.float64)
    mean = x.mean(axis=-1)
    var = np.square(x - mean[..., None]).mean(axis=-1)
    return TimeFeatures(
        mean=mean,
        std=np.sqrt(var),
        var=var,
        rms=np.sqrt(np.square(x).mean(axis=-1)),
        mav=np.abs(x).mean(axis=-1),
    )


def power_spectrum(channel_samples: np.ndarray, fs: float) -> Spectrum:
    """One-sided periodogram |X_k|^2 / N, k = 0..N/2, no taper."""
    x = np.asarray(channel_samples, dtype=np.float64)
    n = x.shape[-1]
    spectrum = fft.rfft(x, axis=-1)
    power = (spectrum.real ** 2 + spectrum.imag ** 2) / n
    return Spectrum(freqs=fft.rfftfreq(n, d=1.0 / fs), power=power, n=n, fs=fs)


def band_masks(freqs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Locomotor [0.5, 3) and freeze [3, 8] membership by bin-centre frequency."""
    locomotor = (freqs >= LOCOMOTOR_BAND[0]) & (freqs < LOCOMOTOR_BAND[1])
    freeze = (freqs >= FREEZE_BAND[0]) & (freqs <= FREEZE_BAND[1])
    return locomotor, freeze


def freq_features(psd: Spectrum) -> FreqFeatures:
    power = psd.power
    total = power.sum(axis=-1)
    safe_total = np.where(total > 0, total, 1.0)
    entropy = entr(power / safe_total[..., None]).sum(axis=-1)

    locomotor, freeze = band_masks(psd.freqs)
    p_loco = power[..., locomotor].sum(axis=-1)
    p_freeze = power[..., freeze].sum(axis=-1)
    fi = np.where(p_freeze > 0, p_freeze / np.maximum(p_loco, FI_EPS), 0.0)

    return FreqFeatures(
        entropy=np.where(total > 0, entropy, 0.0),
        energy=total,
        peak_freq=psd.freqs[np.argmax(power, axis=-1)],
        freeze_index=np.minimum(fi, FI_MAX),
        band_power=p_loco + p_freeze,
    )


_FREQ_FIELD = {
    FeatureKind.ENTROPY: "entropy",
    FeatureKind.ENERGY: "energy",
    FeatureKind.PEAK_FREQ: "peak_freq",
    FeatureKind.FREEZE_INDEX: "freeze_index",
    FeatureKind.BAND_POWER: "band_power",
}


def _time_columns(x: np.ndarray, kinds: set) -> Dict[FeatureKind, np.ndarray]:
    """Only the requested time statistics, sharing intermediates."""
    out: Dict[FeatureKind, np.ndarray] = {}
    if kinds & {FeatureKind.MEAN, FeatureKind.STD, FeatureKind.VAR}:
        mean = x.mean(axis=-1)
        out[FeatureKind.MEAN] = mean
        if kinds & {FeatureKind.STD, FeatureKind.VAR}:
            var = np.square(x - mean[..., None]).mean(axis=-1)
            out[FeatureKind.VAR] = var
            out[FeatureKind.STD] = np.sqrt(var)
    if FeatureKind.RMS in kinds:
        out[FeatureKind.RMS] = np.sqrt(np.square(x).mean(axis=-1))
    if FeatureKind.MAV in kinds:
        out[FeatureKind.MAV] = np.abs(x).mean(axis=-1)
    return out


def compute_features(
    batch: np.ndarray,
    descriptors: Sequence[FeatureDescriptor],
    fs: float,
) -> np.ndarray:
    """Feature values for a (b, 9, L) batch, one column per descriptor.

    Spectra are only computed for channels that carry a spectral descriptor.
    """
    batch = np.asarray(batch, dtype=np.float64)
    time_channels = sorted({CHANNELS.index(d.channel) for d in descriptors if d.kind in TIME_KINDS})
    freq_channels = sorted({CHANNELS.index(d.channel) for d in descriptors if d.kind in FREQ_KINDS})
    time_kinds = {d.kind for d in descriptors if d.kind in TIME_KINDS}

    time_cols: Dict[FeatureKind, np.ndarray] = {}
    if time_channels:
        time_cols = _time_columns(np.ascontiguousarray(batch[:, time_channels, :]), time_kinds)

    freq_cols: Optional[FreqFeatures] = None
    if freq_channels:
        x = np.ascontiguousarray(batch[:, freq_channels, :])
        rows = x.reshape(-1, x.shape[-1])
        # one 1-D transform per channel window, so values never depend on batch shape
        power = np.zeros((rows.shape[0], x.shape[-1] // 2 + 1))
        for i in range(rows.shape[0]):
            power[i] = power_spectrum(rows[i], fs).power
        power = power.reshape(x.shape[0], x.shape[1], x.shape[-1] // 2 + 1)
        freqs = fft.rfftfreq(x.shape[-1], d=1.0 / fs)
        freq_cols = freq_features(Spectrum(freqs=freqs, power=power, n=x.shape[-1], fs=fs))

    out = np.empty((batch.shape[0], len(descriptors)), dtype=np.float64)
    for j, d in enumerate(descriptors):
        ch = CHANNELS.index(d.channel)
        if d.kind in TIME_KINDS:
            out[:, j] = time_cols[d.kind][:, time_channels.index(ch)]
        else:
            out[:, j] = getattr(freq_cols, _FREQ_FIELD[d.kind])[:, freq_channels.index(ch)]
    return out


# --- Feature matrices ---

@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def digest(self) -> str:
        return array_digest(self.mean, self.std)


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    descriptors: Tuple[FeatureDescriptor, ...]
    labels: np.ndarray
    subject_ids: np.ndarray
    stats: Optional[NormalizationStats] = None

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.descriptors]

    def __len__(self) -> int:
        return self.values.shape[0]

    def take(self, idx: np.ndarray) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, values=self.values[idx], labels=self.labels[idx], subject_ids=self.subject_ids[idx])

    def select(self, descriptors: Sequence[FeatureDescriptor]) -> "FeatureMatrix":
        """Columns in the given order; every descriptor must be present."""
        position = {d: j for j, d in enumerate(self.descriptors)}
        missing = [d.name for d in descriptors if d not in position]
        if missing:
            raise SchemaError(f"matrix lacks feature(s) {missing}")
        cols = [position[d] for d in descriptors]
        return FeatureMatrix(
            values=self.values[:, cols],
            descriptors=tuple(descriptors),
            labels=self.labels,
            subject_ids=self.subject_ids,
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        frame = pd.DataFrame(self.values, columns=self.names)
        frame["label"] = self.labels.astype(int)
        frame["subject"] = self.subject_ids.astype(int)
        frame.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "FeatureMatrix":
        frame = pd.read_csv(path)
        for col in ("label", "subject"):
            if col not in frame.columns:
                raise SchemaError(f"{path}: missing column {col!r}")
        names = [c for c in frame.columns if c not in ("label", "subject")]
        return cls(
            values=frame[names].to_numpy(dtype=np.float64),
            descriptors=tuple(FeatureDescriptor.from_name(n) for n in names),
            labels=frame["label"].to_numpy(dtype=np.int8),
            subject_ids=frame["subject"].to_numpy(dtype=np.int32),
        )


def extract_matrix(
    windows: WindowSet,
    channel_subset: Optional[Iterable[str]] = None,
    kind_subset: Optional[Iterable[FeatureKind]] = None,
    descriptors: Optional[Sequence[FeatureDescriptor]] = None,
    batch_size: int = 2048,
) -> FeatureMatrix:
    """Feature matrix over windows.

    Either a channel x kind grid (canonical order) or an explicit descriptor
    list (kept in the given order) selects the columns.
    """
    if descriptors is None:
        channels = list(CHANNELS if channel_subset is None else channel_subset)
        kinds = list(ALL_KINDS if kind_subset is None else kind_subset)
        if not channels:
            raise ConfigError("channel_subset", "must not be empty")
        if not kinds:
            raise ConfigError("kind_subset", "must not be empty")
        unknown = [c for c in channels if c not in CHANNELS]
        if unknown:
            raise ConfigError("channel_subset", f"unknown channel(s) {unknown}")
        descriptors = descriptor_grid(channels, [FeatureKind(k) for k in kinds])
    descriptors = tuple(descriptors)
    if not descriptors:
        raise ConfigError("descriptors", "must not be empty")

    values = np.empty((len(windows), len(descriptors)), dtype=np.float64)
    for lo in range(0, len(windows), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(windows)))
        values[idx] = compute_features(windows.batch(idx), descriptors, windows.fs)

    if not np.isfinite(values).all():
        bad = np.argwhere(~np.isfinite(values))[0]
        raise FeatureError(f"non-finite value for {descriptors[bad[1]].name} in window {bad[0]}")
    return FeatureMatrix(
        values=values,
        descriptors=descriptors,
        labels=windows.labels.copy(),
        subject_ids=windows.subject_ids.copy(),
    )


def normalize(matrix: FeatureMatrix, stats: Optional[NormalizationStats] = None) -> FeatureMatrix:
    """Z-score columns; stats are fitted on this matrix when not supplied."""
    if stats is None:
        std = matrix.values.std(axis=0)
        stats = NormalizationStats(mean=matrix.values.mean(axis=0), std=np.maximum(std, STD_FLOOR))
    if stats.mean.shape[0] != matrix.values.shape[1]:
        raise SchemaError(f"stats cover {stats.mean.shape[0]} columns, matrix has {matrix.values.shape[1]}")
    return replace(matrix, values=stats.apply(matrix.values), stats=stats)


# --- Subset selection ---

@dataclass(frozen=True)
class FeatureSubset:
    descriptors: Tuple[FeatureDescriptor, ...]
    scores: Tuple[float, ...] = field(default=())

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.descriptors]

    def __len__(self) -> int:
        return len(self.descriptors)

    def manifest_text(self) -> str:
        return "\n".join(self.names) + "\n"

    def digest(self) -> bytes:
        """32-byte SHA-256 of the manifest text; pins a model's input schema."""
        return bytes.fromhex(sha256_hex(self.manifest_text().encode("utf-8")))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.manifest_text(), encoding="utf-8")

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "FeatureSubset":
        return cls(tuple(FeatureDescriptor.from_name(n) for n in names))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FeatureSubset":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        names = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
        if not names:
            raise SchemaError(f"{path}: empty feature manifest")
        return cls.from_names(names)


def mutual_information(column: np.ndarray, labels: np.ndarray, bins: int = MI_BINS) -> float:
    """MI (nats) between an equal-width binned column and the binary label."""
    edges = np.linspace(column.min(), column.max(), bins + 1)
    binned = np.clip(np.digitize(column, edges[1:-1]), 0, bins - 1)
    return float(mutual_info_score(labels, binned))


def select_features(
    train_matrix: FeatureMatrix,
    labels: Optional[np.ndarray] = None,
    target_count: int = 20,
    corr_threshold: float = 0.95,
) -> FeatureSubset:
    """Rank by mutual information, drop near-duplicates, keep the top target_count."""
    if target_count < 1:
        raise ConfigError("target_count", f"must be positive, got {target_count}")
    X = train_matrix.values
    y = np.asarray(train_matrix.labels if labels is None else labels)

    survivors = np.flatnonzero(np.ptp(X, axis=0) > 0)
    mi = {j: mutual_information(X[:, j], y) for j in survivors}
    ranked = sorted(survivors, key=lambda j: (-mi[j], j))

    centred = X[:, survivors] - X[:, survivors].mean(axis=0)
    scaled = centred / np.linalg.norm(centred, axis=0)
    column_of = {j: i for i, j in enumerate(survivors)}

    kept: List[int] = []
    for j in ranked:
        if kept:
            rho = scaled[:, [column_of[k] for k in kept]].T @ scaled[:, column_of[j]]
            if np.max(np.abs(rho)) > corr_threshold:
                continue
        kept.append(j)
        if len(kept) == target_count:
            break

    if len(kept) < target_count:
        logger.warning(
            f"⚠️ only {len(kept)} feature(s) survive selection, {target_count} requested; keeping all survivors"
        )
    return FeatureSubset(
        descriptors=tuple(train_matrix.descriptors[j] for j in kept),
        scores=tuple(mi[j] for j in kept),
    )


# --- Feature-set specs ---

@dataclass(frozen=True)
class FeatureSpec:
    """Resolved feature-set request: a base grid, optional selection, or a pinned manifest."""

    base: Tuple[FeatureDescriptor, ...]
    select_k: Optional[int] = None
    manifest: Optional[FeatureSubset] = None

    @property
    def extract(self) -> Tuple[FeatureDescriptor, ...]:
        return self.manifest.descriptors if self.manifest is not None else self.base


def parse_feature_spec(spec: str, channels: Sequence[str] = CHANNELS) -> FeatureSpec:
    """F_D | F_TD | selected:<k>[:F_D|:F_TD] | manifest:<path>, restricted to channels."""
    if spec.startswith("manifest:"):
        subset = FeatureSubset.load(spec.split(":", 1)[1])
        outside = [d.name for d in subset.descriptors if d.channel not in channels]
        if outside:
            raise SchemaError(f"manifest feature(s) {outside} use channels outside {list(channels)}")
        return FeatureSpec(base=subset.descriptors, manifest=subset)
    if spec == "F_D":
        return FeatureSpec(base=descriptor_grid(channels, ALL_KINDS))
    if spec == "F_TD":
        return FeatureSpec(base=descriptor_grid(channels, TIME_KINDS))
    if spec.startswith("selected:"):
        parts = spec.split(":")
        kinds = TIME_KINDS if len(parts) == 3 and parts[2] == "F_TD" else ALL_KINDS
        return FeatureSpec(base=descriptor_grid(channels, kinds), select_k=int(parts[1]))
    raise ConfigError("features", f"unrecognised feature spec {spec!r}")
