"""
DAPHNet ingestion

Parses the 11-column DAPHNet text format into sample streams, loads a whole
cohort, counts FoG episodes and builds the train/test/CV partitions.
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError, ParseError, StratificationError
from .models import EpisodeSummary

logger = logging.getLogger(__name__)

N_CHANNELS = 9
N_FIELDS = 11
DEFAULT_FS = 64
DEFAULT_EXCLUDED = frozenset({4, 10})
DEFAULT_PATTERN = r"S(?P<subject>\d+)R(?P<run>\d+)\.txt"


class Label(IntEnum):
    DEBRIEF = 0
    NORMAL = 1
    FOG = 2


class SampleRecord(NamedTuple):
    timestamp: int
    accel: Tuple[int, ...]
    label: Label


@dataclass(frozen=True)
class SampleStream:
    """One parsed recording: timestamps (ms), 9-channel milli-g readings, labels."""

    timestamps: np.ndarray
    accel: np.ndarray
    labels: np.ndarray
    subject_id: Optional[int] = None
    run_id: Optional[int] = None
    source: str = "<stream>"

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, i: int) -> SampleRecord:
        return SampleRecord(
            int(self.timestamps[i]),
            tuple(int(v) for v in self.accel[i]),
            Label(int(self.labels[i])),
        )

    def __iter__(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            yield self[i]


@dataclass(frozen=True)
class BinaryStream:
    """Debrief-free stream; labels are 1 for FoG and 0 for Normal.

    `segment_ids` changes value wherever debrief samples were dropped, so
    windows never bridge a removed region.
    """

    timestamps: np.ndarray
    accel: np.ndarray
    labels: np.ndarray
    segment_ids: np.ndarray
    subject_id: Optional[int] = None
    run_id: Optional[int] = None
    source: str = "<stream>"

    def __len__(self) -> int:
        return len(self.timestamps)

    def segments(self) -> List[slice]:
        if len(self) == 0:
            return []
        breaks = np.flatnonzero(np.diff(self.segment_ids)) + 1
        edges = np.concatenate(([0], breaks, [len(self)]))
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


@dataclass(frozen=True)
class FogEpisode:
    subject_id: Optional[int]
    run_id: Optional[int]
    start_index: int
    end_index: int
    onset_ts: int
    end_ts: int
    duration_s: float


@dataclass
class Cohort:
    """Recordings per subject (ordered by run) plus the excluded subject ids."""

    subjects: Dict[int, List[SampleStream]] = field(default_factory=dict)
    excluded: frozenset = DEFAULT_EXCLUDED

    @property
    def included_ids(self) -> List[int]:
        return [s for s in sorted(self.subjects) if s not in self.excluded]

    def streams(self, include_excluded: bool = False) -> Iterator[SampleStream]:
        for subject in sorted(self.subjects):
            if subject in self.excluded and not include_excluded:
                continue
            yield from self.subjects[subject]


# --- Parsing ---

def parse_daphnet(
    stream: Iterable[str],
    source: str = "<stream>",
    subject_id: Optional[int] = None,
    run_id: Optional[int] = None,
) -> SampleStream:
    """Parse whitespace-separated DAPHNet lines (11 integers each)."""
    rows: List[List[int]] = []
    for lineno, line in enumerate(stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != N_FIELDS:
            raise ParseError(source, lineno, f"expected {N_FIELDS} fields, got {len(tokens)}")
        try:
            values = [int(tok) for tok in tokens]
        except ValueError:
            bad = next(tok for tok in tokens if not re.fullmatch(r"[+-]?\d+", tok))
            raise ParseError(source, lineno, f"non-integer token {bad!r}") from None
        if values[-1] not in (0, 1, 2):
            raise ParseError(source, lineno, f"label must be 0, 1 or 2, got {values[-1]}")
        rows.append(values)

    if rows:
        table = np.asarray(rows, dtype=np.int64)
    else:
        table = np.zeros((0, N_FIELDS), dtype=np.int64)

    timestamps = table[:, 0]
    backwards = np.flatnonzero(np.diff(timestamps) < 0)
    if backwards.size:
        logger.warning(
            f"⚠️ {source}: {backwards.size} non-monotone timestamp(s), "
            f"first at record {int(backwards[0]) + 2}; records kept"
        )

    return SampleStream(
        timestamps=timestamps,
        accel=table[:, 1:1 + N_CHANNELS].astype(np.int32),
        labels=table[:, -1].astype(np.int8),
        subject_id=subject_id,
        run_id=run_id,
        source=source,
    )


def serialize_daphnet(stream: SampleStream) -> str:
    """Inverse of parse_daphnet."""
    lines = []
    for t, accel, label in zip(stream.timestamps, stream.accel, stream.labels):
        lines.append(" ".join([str(int(t)), *(str(int(v)) for v in accel), str(int(label))]))
    return "\n".join(lines) + ("\n" if lines else "")


def load_daphnet_file(path: Union[str, Path], pattern: str = DEFAULT_PATTERN) -> SampleStream:
    path = Path(path)
    match = re.fullmatch(pattern, path.name)
    subject_id = int(match.group("subject")) if match and "subject" in match.groupdict() else None
    run_id = int(match.group("run")) if match and "run" in match.groupdict() else None
    with open(path, "r", encoding="utf-8") as f:
        return parse_daphnet(f, source=path.name, subject_id=subject_id, run_id=run_id)


def load_cohort(
    data_dir: Union[str, Path],
    pattern: str = DEFAULT_PATTERN,
    exclude: Iterable[int] = DEFAULT_EXCLUDED,
    workers: int = 4,
) -> Cohort:
    """Parse every matching file under data_dir; merge by (subject, run)."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"dataset directory {data_dir} does not exist")
    regex = re.compile(pattern)
    files = sorted(p for p in data_dir.iterdir() if p.is_file() and regex.fullmatch(p.name))
    if not files:
        raise DataError(f"no files matching {pattern!r} in {data_dir}")

    logger.info(f"📂 Parsing {len(files)} recordings from {data_dir}")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        streams = list(pool.map(lambda p: load_daphnet_file(p, pattern), files))

    subjects: Dict[int, List[SampleStream]] = {}
    for s in sorted(streams, key=lambda s: (s.subject_id or 0, s.run_id or 0)):
        if s.subject_id is None:
            raise DataError(f"{s.source}: pattern {pattern!r} has no 'subject' group")
        subjects.setdefault(s.subject_id, []).append(s)
    return Cohort(subjects=subjects, excluded=frozenset(exclude))


# --- Label handling ---

def binarize(samples: SampleStream) -> BinaryStream:
    """Drop debrief samples; FoG becomes 1 (positive), Normal 0."""
    kept = np.flatnonzero(samples.labels != Label.DEBRIEF)
    if kept.size:
        segment_ids = np.cumsum(np.concatenate(([0], np.diff(kept) > 1))).astype(np.int32)
    else:
        segment_ids = np.zeros(0, dtype=np.int32)
    return BinaryStream(
        timestamps=samples.timestamps[kept],
        accel=samples.accel[kept],
        labels=(samples.labels[kept] == Label.FOG).astype(np.int8),
        segment_ids=segment_ids,
        subject_id=samples.subject_id,
        run_id=samples.run_id,
        source=samples.source,
    )


def fog_episodes(stream: Union[SampleStream, BinaryStream], fs: int = DEFAULT_FS) -> List[FogEpisode]:
    """Maximal runs of FoG samples."""
    if isinstance(stream, BinaryStream):
        mask = stream.labels == 1
        boundary = np.diff(stream.segment_ids) != 0
    else:
        mask = stream.labels == Label.FOG
        boundary = np.zeros(max(len(stream) - 1, 0), dtype=bool)
    if not mask.any():
        return []

    m = mask.astype(np.int8)
    starts = np.flatnonzero(np.diff(np.concatenate(([0], m))) == 1)
    ends = np.flatnonzero(np.diff(np.concatenate((m, [0]))) == -1) + 1
    # split runs that straddle a dropped region
    cuts = np.flatnonzero(boundary & mask[:-1] & mask[1:]) + 1 if len(boundary) else np.array([], int)
    if cuts.size:
        starts = np.sort(np.concatenate((starts, cuts)))
        ends = np.sort(np.concatenate((ends, cuts)))

    return [
        FogEpisode(
            subject_id=stream.subject_id,
            run_id=stream.run_id,
            start_index=int(a),
            end_index=int(b),
            onset_ts=int(stream.timestamps[a]),
            end_ts=int(stream.timestamps[b - 1]),
            duration_s=(b - a) / fs,
        )
        for a, b in zip(starts, ends)
    ]


# --- Partitioning ---

def _labels_of(items) -> np.ndarray:
    return np.asarray(getattr(items, "labels", items)).astype(np.int64)


def split(windows, ratio: float = 0.70, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified train/test split; returns sorted index arrays."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError("ratio", f"must lie strictly between 0 and 1, got {ratio}")
    labels = _labels_of(windows)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 2:
            raise StratificationError(f"class {cls} has {idx.size} window(s); need at least 2 to stratify")
        idx = rng.permutation(idx)
        n_train = min(max(int(round(idx.size * ratio)), 1), idx.size - 1)
        train.append(idx[:n_train])
        test.append(idx[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def kfold(windows, k: int = 10, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold: per-class shuffles dealt round-robin across folds."""
    if k < 2:
        raise ConfigError("folds", f"k must be at least 2, got {k}")
    labels = _labels_of(windows)
    if k > labels.size:
        raise StratificationError(f"k={k} exceeds the {labels.size} available windows")
    rng = np.random.default_rng(seed)
    order = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise StratificationError(f"class {cls} has {idx.size} window(s); need at least k={k}")
        order.append(rng.permutation(idx))
    dealt = np.concatenate(order)
    fold_of = np.empty(labels.size, dtype=np.int64)
    fold_of[dealt] = np.arange(dealt.size) % k

    folds = []
    for f in range(k):
        val = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, val))
    return folds


def leave_one_subject_out(subject_ids: Sequence[int]) -> List[Tuple[int, np.ndarray, np.ndarray]]:
    """Subject-independent folds: (held-out subject, train idx, validation idx)."""
    subject_ids = np.asarray(subject_ids)
    subjects = np.unique(subject_ids)
    if subjects.size < 2:
        raise StratificationError("leave-one-subject-out needs at least two subjects")
    return [
        (int(s), np.flatnonzero(subject_ids != s), np.flatnonzero(subject_ids == s))
        for s in subjects
    ]


def assert_no_excluded(subject_ids: Sequence[int], excluded: Iterable[int]) -> None:
    leaked = set(np.unique(np.asarray(subject_ids)).tolist()) & set(excluded)
    if leaked:
        raise DataError(f"excluded subject(s) {sorted(leaked)} present in a partition")


def episode_summary(cohort: Cohort, fs: int = DEFAULT_FS) -> EpisodeSummary:
    """FoG episode statistics over every subject, excluded ones included."""
    durations: List[float] = []
    per_subject: Dict[str, int] = {}
    for stream in cohort.streams(include_excluded=True):
        episodes = fog_episodes(stream, fs)
        key = str(stream.subject_id)
        per_subject[key] = per_subject.get(key, 0) + len(episodes)
        durations.extend(e.duration_s for e in episodes)
    if not durations:
        return EpisodeSummary(count=0, per_subject=per_subject)
    d = np.asarray(durations)
    return EpisodeSummary(
        count=len(durations),
        mean_s=float(d.mean()),
        std_s=float(d.std()),
        min_s=float(d.min()),
        max_s=float(d.max()),
        per_subject=per_subject,
    )
