"""
Streaming simulator

Feeds samples one at a time through a fixed-size ring buffer, classifies a
window every `stride` samples with the same pipeline the batch harness uses,
and emits prediction and RAS-trigger events. Memory is accounted
analytically against the deploy target's SRAM budget.
"""

import logging
import time
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import SchemaError
from .features import WindowSet, make_windows
from .ingest import BinaryStream, FogEpisode, SampleStream, binarize, fog_episodes
from .models import (
    DetectionLatencyReport,
    LatencySummary,
    MemoryBudgetReport,
    StreamConfig,
    StreamEvent,
    StreamSummary,
)
from .pipeline import FittedPipeline

logger = logging.getLogger(__name__)

N_CHANNELS = 9
F32 = 4
COMPLEX_F32 = 8
MS = 1e-3


class RingBuffer:
    """Fixed-capacity f32 sample buffer; the newest `capacity` samples survive."""

    __slots__ = ("data", "ptr", "count", "capacity")

    def __init__(self, capacity: int, n_channels: int = N_CHANNELS):
        self.data = np.zeros((capacity, n_channels), dtype=np.float32)
        self.capacity = capacity
        self.ptr = 0
        self.count = 0

    def push(self, sample: np.ndarray) -> None:
        self.data[self.ptr] = sample
        self.ptr = (self.ptr + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)
        assert self.count <= self.capacity

    def latest(self, n: int) -> np.ndarray:
        """The newest n samples as a (channels, n) float64 window, oldest first."""
        if n > self.count:
            raise ValueError(f"ring buffer holds {self.count} samples, {n} requested")
        idx = (self.ptr - n + np.arange(n)) % self.capacity
        return np.ascontiguousarray(self.data[idx].T, dtype=np.float64)

    def reset(self) -> None:
        self.ptr = 0
        self.count = 0

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


class StreamResult(NamedTuple):
    events: List[StreamEvent]
    budget: MemoryBudgetReport
    latency: LatencySummary

    @property
    def predictions(self) -> List[StreamEvent]:
        return [e for e in self.events if e.kind == "prediction"]

    @property
    def triggers(self) -> List[StreamEvent]:
        return [e for e in self.events if e.kind == "ras_trigger"]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.predictions], dtype=np.int64)


# --- Memory accounting ---

def memory_budget(
    config: StreamConfig,
    n_features: int,
    spectral: bool,
    model_bytes: int,
    inference_scratch_bytes: int = 0,
) -> MemoryBudgetReport:
    """Byte accounting from configuration arithmetic.

    ring: max(w*fs, stride) x 9 f32; feature scratch: the f32 feature vector
    plus, when any spectral feature is used, a w*fs-point complex f32 spectrum.
    """
    ring = max(config.window_samples, config.stride) * N_CHANNELS * F32
    scratch = n_features * F32 + (config.window_samples * COMPLEX_F32 if spectral else 0)
    total = ring + scratch + inference_scratch_bytes + model_bytes
    return MemoryBudgetReport(
        ring_buffer_bytes=ring,
        feature_scratch_bytes=scratch,
        inference_scratch_bytes=inference_scratch_bytes,
        model_bytes=model_bytes,
        total_bytes=total,
        budget_bytes=config.budget_bytes,
        passed=total <= config.budget_bytes,
    )


def budget_check(config: StreamConfig, pipeline: FittedPipeline) -> MemoryBudgetReport:
    return memory_budget(
        config,
        n_features=len(pipeline.descriptors),
        spectral=pipeline.has_spectral_features,
        model_bytes=pipeline.size_bytes,
        inference_scratch_bytes=pipeline.inference_scratch_bytes,
    )


# --- Simulation ---

def check_schema(config: StreamConfig, pipeline: FittedPipeline) -> None:
    if config.manifest and list(config.manifest) != pipeline.subset.names:
        raise SchemaError("stream manifest does not match the model's feature manifest")
    if config.fs != pipeline.fs:
        raise SchemaError(f"stream runs at {config.fs} Hz, the pipeline at {pipeline.fs} Hz")
    if pipeline.w is not None and config.w != pipeline.w:
        raise SchemaError(f"stream windows are {config.w} s, the pipeline was trained on {pipeline.w} s")
    if pipeline.stride is not None and config.stride != pipeline.stride:
        raise SchemaError(f"stream hop is {config.stride} samples, the pipeline was trained with {pipeline.stride}")


def run_stream(
    samples: Union[SampleStream, BinaryStream],
    pipeline: FittedPipeline,
    config: StreamConfig,
) -> StreamResult:
    """Replay one recording sample by sample.

    Debrief samples are dropped and the buffer restarts after each dropped
    region, so windows match the batch windowing exactly.
    """
    check_schema(config, pipeline)
    budget = budget_check(config, pipeline)
    if not budget.passed:
        logger.warning(f"⚠️ working set {budget.total_bytes} B exceeds the {budget.budget_bytes} B budget")

    stream = samples if isinstance(samples, BinaryStream) else binarize(samples)
    length, stride = config.window_samples, config.stride
    debounce = int(round(config.debounce_windows * length))
    ring = RingBuffer(max(length, stride))

    events: List[StreamEvent] = []
    feature_us, inference_us = [], []
    since_reset = 0
    last_trigger: Optional[int] = None
    accel = stream.accel.astype(np.float32)

    for i in range(len(stream)):
        if i and stream.segment_ids[i] != stream.segment_ids[i - 1]:
            ring.reset()
            since_reset = 0
        ring.push(accel[i])
        since_reset += 1
        if since_reset < length or (since_reset - length) % stride:
            continue

        window = ring.latest(length)[None, :, :]
        t0 = time.perf_counter()
        values = pipeline.extract(window)
        t1 = time.perf_counter()
        label = int(pipeline.predict_values(values)[0])
        t2 = time.perf_counter()
        scores = pipeline.scores(values)[0]
        feature_us.append((t1 - t0) * 1e6)
        inference_us.append((t2 - t1) * 1e6)

        prediction = StreamEvent(
            kind="prediction",
            start_ts=int(stream.timestamps[i - length + 1]),
            end_ts=int(stream.timestamps[i]),
            end_index=i,
            label=label,
            scores=[float(s) for s in scores],
            feature_us=feature_us[-1],
            inference_us=inference_us[-1],
        )
        events.append(prediction)
        if label == 1 and (last_trigger is None or i - last_trigger >= debounce):
            events.append(prediction.model_copy(update={"kind": "ras_trigger"}))
            last_trigger = i

    return StreamResult(events=events, budget=budget, latency=summarize_latency(feature_us, inference_us))


def summarize_latency(feature_us: Sequence[float], inference_us: Sequence[float]) -> LatencySummary:
    if not feature_us:
        return LatencySummary()
    f, g = np.asarray(feature_us), np.asarray(inference_us)
    return LatencySummary(
        feature_us_mean=float(f.mean()),
        inference_us_mean=float(g.mean()),
        total_us_mean=float((f + g).mean()),
        total_us_max=float((f + g).max()),
    )


def expected_predictions(n_samples: int, window_samples: int, stride: int) -> int:
    """Prediction count for one contiguous segment."""
    if n_samples < window_samples:
        return 0
    return (n_samples - window_samples) // stride + 1


# --- Detection delay ---

def detection_latency(
    events: Iterable[StreamEvent],
    episodes: Sequence[FogEpisode],
    window_samples: int,
) -> DetectionLatencyReport:
    """Seconds from each episode's onset to the end of the first FoG window overlapping it."""
    fog = sorted((e for e in events if e.kind == "prediction" and e.label == 1), key=lambda e: e.end_index)
    delays: List[Optional[float]] = []
    for episode in episodes:
        hit = next(
            (
                e for e in fog
                if e.end_index >= episode.start_index
                and e.end_index - window_samples + 1 < episode.end_index
            ),
            None,
        )
        delays.append(None if hit is None else max(0.0, (hit.end_ts - episode.onset_ts) * MS))

    detected = np.array([d for d in delays if d is not None])
    n = len(delays)
    return DetectionLatencyReport(
        n_episodes=n,
        delays_s=delays,
        mean_s=float(detected.mean()) if detected.size else None,
        median_s=float(np.median(detected)) if detected.size else None,
        miss_rate=(n - detected.size) / n if n else None,
    )


def simulate(
    samples: SampleStream,
    pipeline: FittedPipeline,
    config: StreamConfig,
    out_dir: Optional[Union[str, Path]] = None,
) -> StreamSummary:
    """run_stream plus detection delays; optionally writes events.jsonl and summary.json."""
    result = run_stream(samples, pipeline, config)
    episodes = fog_episodes(binarize(samples), config.fs)
    summary = StreamSummary(
        source=samples.source,
        n_samples=len(samples),
        n_predictions=len(result.predictions),
        n_triggers=len(result.triggers),
        budget=result.budget,
        latency=result.latency,
        detection=detection_latency(result.events, episodes, config.window_samples),
        config=config.model_dump(mode="json"),
    )
    _write_outputs(summary, result.events, out_dir)
    logger.info(
        f"📡 {samples.source}: {summary.n_predictions} predictions, {summary.n_triggers} RAS trigger(s), "
        f"budget {'✅' if result.budget.passed else '❌'} {result.budget.total_bytes}/{result.budget.budget_bytes} B"
    )
    return summary


def write_events(events: Iterable[StreamEvent], path: Union[str, Path]) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        for event in events:
            f.write(event.model_dump_json() + "\n")
    return Path(path)


# --- Cache replay ---

def cache_streams(windows: WindowSet, stride: int) -> List[Tuple[int, BinaryStream]]:
    """Contiguous sample runs rebuilt from cached window starts, with their pool offsets.

    The cache keeps no per-sample timestamps or labels: timestamps are re-derived
    at the nominal rate from each run's first window, and labels are zero.
    """
    if len(windows) == 0:
        return []
    starts = windows.starts
    breaks = np.flatnonzero((np.diff(starts) != stride) | (np.diff(windows.subject_ids) != 0)) + 1
    edges = np.concatenate(([0], breaks, [len(starts)]))
    runs = []
    for a, b in zip(edges[:-1], edges[1:]):
        lo, hi = int(starts[a]), int(starts[b - 1]) + windows.length
        n = hi - lo
        runs.append((lo, BinaryStream(
            timestamps=windows.start_ts[a] + np.round(np.arange(n) * 1000 / windows.fs).astype(np.int64),
            accel=windows.samples[lo:hi],
            labels=np.zeros(n, dtype=np.int8),
            segment_ids=np.zeros(n, dtype=np.int32),
            subject_id=int(windows.subject_ids[a]),
            source=f"cache[{a}:{b}]",
        )))
    return runs


def replay_cache(windows: WindowSet, stride: int, pipeline: FittedPipeline, config: StreamConfig) -> StreamResult:
    """Stream every cached run; end_index counts from the start of the sample pool."""
    if (windows.w, windows.fs, stride) != (config.w, config.fs, config.stride):
        raise SchemaError(
            f"cache holds w={windows.w} fs={windows.fs} stride={stride}; "
            f"the stream runs w={config.w} fs={config.fs} stride={config.stride}"
        )
    events: List[StreamEvent] = []
    for offset, stream in cache_streams(windows, stride):
        result = run_stream(stream, pipeline, config)
        events.extend(e.model_copy(update={"end_index": e.end_index + offset}) for e in result.events)
    predictions = [e for e in events if e.kind == "prediction"]
    return StreamResult(
        events=events,
        budget=budget_check(config, pipeline),
        latency=summarize_latency([e.feature_us for e in predictions], [e.inference_us for e in predictions]),
    )


def simulate_cache(
    windows: WindowSet,
    stride: int,
    pipeline: FittedPipeline,
    config: StreamConfig,
    source: str = "<cache>",
    out_dir: Optional[Union[str, Path]] = None,
) -> StreamSummary:
    """replay_cache with the same outputs as simulate; no detection delays without sample labels."""
    result = replay_cache(windows, stride, pipeline, config)
    summary = StreamSummary(
        source=source,
        n_samples=sum(len(stream) for _, stream in cache_streams(windows, stride)),
        n_predictions=len(result.predictions),
        n_triggers=len(result.triggers),
        budget=result.budget,
        latency=result.latency,
        config=config.model_dump(mode="json"),
    )
    _write_outputs(summary, result.events, out_dir)
    logger.info(f"📡 {source}: {summary.n_predictions} predictions, {summary.n_triggers} RAS trigger(s)")
    return summary


def _write_outputs(summary: StreamSummary, events: Sequence[StreamEvent], out_dir: Optional[Union[str, Path]]) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_events(events, out / "events.jsonl")
    (out / "summary.json").write_text(summary.model_dump_json(indent=2), encoding="utf-8")


def read_events(path: Union[str, Path]) -> List[StreamEvent]:
    with open(path, "r", encoding="utf-8") as f:
        return [StreamEvent.model_validate_json(line) for line in f if line.strip()]


def batch_labels(samples: SampleStream, pipeline: FittedPipeline, config: StreamConfig) -> np.ndarray:
    """Labels the batch path assigns to the same windows the stream sees."""
    windows = make_windows(binarize(samples), config.w, config.fs, config.stride)
    return pipeline.predict_windows(windows)
