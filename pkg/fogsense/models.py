"""
Data Models

Configuration and report models shared by the experiment harness, the stream
simulator and the CLI.
"""

import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .utils import canonical_json, sha256_hex

FEATURE_SPEC_RE = re.compile(r"^(F_D|F_TD|selected:\d+(:F_(D|TD))?|manifest:.+)$")

SENSOR_NAMES = ("ankle", "leg", "torso")
CHANNEL_NAMES = ("A_X", "A_Y", "A_Z", "L_X", "L_Y", "L_Z", "T_X", "T_Y", "T_Z")

ModelFamily = Literal["protonn", "decision_tree", "random_forest", "fi_threshold"]


def config_error_from(exc: ValidationError) -> ConfigError:
    """First pydantic validation error as a ConfigError naming the field."""
    err = exc.errors()[0]
    field = ".".join(str(p) for p in err.get("loc", ())) or "config"
    return ConfigError(field, err.get("msg", "invalid value"))


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# --- Hyperparameters ---

class ProtoNNHyper(StrictModel):
    """ProtoNN knobs; budgets of None mean dense (inactive constraint)."""

    d_hat: int = Field(10, gt=0)
    m: int = Field(20, ge=2)
    s_w: Optional[int] = Field(None, ge=0)
    s_b: Optional[int] = Field(None, ge=0)
    s_z: Optional[int] = Field(None, ge=0)
    epochs: int = Field(100, gt=0)
    batch_size: int = Field(256, gt=0)
    learning_rate: float = Field(0.05, gt=0)
    lr_decay: float = Field(0.5, gt=0, le=1)
    lr_decay_every: int = Field(25, gt=0)
    gamma_scale: float = Field(2.5, gt=0)
    class_weighting: bool = False
    seed: Optional[int] = None


class TreeHyper(StrictModel):
    max_depth: Optional[int] = Field(None, gt=0)
    min_leaf: int = Field(1, gt=0)


class ForestHyper(StrictModel):
    n_trees: int = Field(51, gt=0)
    max_depth: Optional[int] = Field(None, gt=0)
    min_leaf: int = Field(1, gt=0)
    feature_frac: Optional[float] = Field(None, gt=0, le=1)
    bootstrap: bool = True


class ThresholdHyper(StrictModel):
    channel: str = "A_Y"
    quantiles: int = Field(40, ge=2)

    @field_validator("channel")
    @classmethod
    def _known_channel(cls, v: str) -> str:
        if v not in CHANNEL_NAMES:
            raise ValueError(f"unknown channel {v!r}")
        return v


# --- Run configuration ---

class RunConfig(StrictModel):
    """Everything one experiment needs; serialized verbatim into every output."""

    data_dir: Optional[Path] = None
    cache: Optional[Path] = None
    pattern: str = r"S(?P<subject>\d+)R(?P<run>\d+)\.txt"
    include_subjects: List[int] = Field(default_factory=list)
    exclude_subjects: List[int] = Field(default_factory=lambda: [4, 10])
    fs: int = Field(64, gt=0)
    w: int = Field(2, ge=1, le=8)
    stride: int = Field(32, gt=0)
    label_rule: Literal["majority", "any"] = "majority"
    features: str = "F_D"
    corr_threshold: float = Field(0.95, gt=0, le=1)
    channels: List[str] = Field(default_factory=lambda: list(CHANNEL_NAMES))
    model: ModelFamily = "protonn"
    protonn: ProtoNNHyper = Field(default_factory=ProtoNNHyper)
    tree: TreeHyper = Field(default_factory=TreeHyper)
    forest: ForestHyper = Field(default_factory=ForestHyper)
    threshold: ThresholdHyper = Field(default_factory=ThresholdHyper)
    evaluation: Literal["cv", "holdout", "loso"] = "cv"
    folds: int = Field(10, ge=2)
    split_ratio: float = Field(0.7, gt=0, lt=1)
    seed: int = 0
    workers: int = Field(1, gt=0)
    timing_windows: int = Field(200, ge=0)
    output_dir: Path = Path("runs")

    @field_validator("features")
    @classmethod
    def _feature_spec(cls, v: str) -> str:
        if not FEATURE_SPEC_RE.match(v):
            raise ValueError("expected F_D, F_TD, selected:<k>[:F_D|:F_TD] or manifest:<path>")
        return v

    @field_validator("channels")
    @classmethod
    def _channels(cls, v: List[str]) -> List[str]:
        expanded: List[str] = []
        for name in v:
            if name in SENSOR_NAMES:
                offset = SENSOR_NAMES.index(name) * 3
                expanded.extend(CHANNEL_NAMES[offset:offset + 3])
            elif name in CHANNEL_NAMES:
                expanded.append(name)
            else:
                raise ValueError(f"unknown channel or sensor {name!r}")
        if not expanded:
            raise ValueError("at least one channel is required")
        return [c for c in CHANNEL_NAMES if c in expanded]

    @model_validator(mode="after")
    def _stride_fits_window(self) -> "RunConfig":
        if self.stride > self.w * self.fs:
            raise ValueError(f"stride {self.stride} exceeds the window length {self.w * self.fs}")
        return self

    @property
    def window_samples(self) -> int:
        return self.w * self.fs

    def config_hash(self) -> str:
        return sha256_hex(canonical_json(self.model_dump(mode="json")).encode())

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(dict(data))
        except ValidationError as exc:
            raise config_error_from(exc) from None

    def with_overrides(self, **changes: Any) -> "RunConfig":
        merged = self.model_dump()
        merged.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_mapping(merged)


class Windowing(StrictModel):
    """Sampling rate, window length and hop a model was trained with."""

    fs: int = Field(64, gt=0)
    w: int = Field(2, ge=1)
    stride: int = Field(32, gt=0)


class StreamConfig(StrictModel):
    w: int = Field(2, ge=1)
    fs: int = Field(64, gt=0)
    stride: int = Field(32, gt=0)
    manifest: List[str] = Field(default_factory=list)
    debounce_windows: float = Field(1.0, ge=0)
    budget_bytes: int = Field(8192, gt=0)

    @model_validator(mode="after")
    def _stride_fits_window(self) -> "StreamConfig":
        if self.stride > self.w * self.fs:
            raise ValueError(f"stride {self.stride} exceeds the window length {self.w * self.fs}")
        return self

    @property
    def window_samples(self) -> int:
        return self.w * self.fs


# --- Reports ---

class ConfusionCounts(BaseModel):
    tp: int = Field(0, ge=0)
    tn: int = Field(0, ge=0)
    fp: int = Field(0, ge=0)
    fn: int = Field(0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp, tn=self.tn + other.tn, fp=self.fp + other.fp, fn=self.fn + other.fn
        )


class RecallScores(BaseModel):
    """None marks an undefined ratio (zero denominator), never 0."""

    counts: ConfusionCounts = Field(default_factory=ConfusionCounts)
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    average_recall: Optional[float] = None


class TimingStats(BaseModel):
    feature_us_mean: Optional[float] = None
    feature_us_p95: Optional[float] = None
    feature_us_max: Optional[float] = None
    inference_us_mean: Optional[float] = None
    inference_us_p95: Optional[float] = None
    inference_us_max: Optional[float] = None
    n_windows: int = 0


class FoldReport(RecallScores):
    fold: int
    held_out_subject: Optional[int] = None
    n_train: int = 0
    n_validation: int = 0
    model_size_bytes: int = 0
    features: List[str] = Field(default_factory=list)
    stats_digest: str = ""


class EvalReport(RecallScores):
    family: str
    evaluation: str
    model_size_bytes: int = 0
    folds: List[FoldReport] = Field(default_factory=list)
    per_subject: Dict[str, RecallScores] = Field(default_factory=dict)
    timing: TimingStats = Field(default_factory=TimingStats)
    config: Dict[str, Any] = Field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0
    dataset_digest: str = ""


class SweepRow(BaseModel):
    family: str
    target_bytes: float
    achieved_bytes: Optional[int] = None
    average_recall: Optional[float] = None
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    hyper: Dict[str, Any] = Field(default_factory=dict)


class LatencyRow(BaseModel):
    w: int
    fd_us: float
    ftd_us: float
    ratio: float
    n_fd: int
    n_ftd: int
    n_windows: int
    fd_average_recall: Optional[float] = None
    ftd_average_recall: Optional[float] = None
    fd_features: List[str] = Field(default_factory=list)
    ftd_features: List[str] = Field(default_factory=list)


class AblationRow(RecallScores):
    sensors: List[str]
    channels: List[str]


class WindowRow(RecallScores):
    w: int
    family: str
    model_size_bytes: int = 0


class EpisodeSummary(BaseModel):
    count: int
    mean_s: Optional[float] = None
    std_s: Optional[float] = None
    min_s: Optional[float] = None
    max_s: Optional[float] = None
    per_subject: Dict[str, int] = Field(default_factory=dict)


class StreamEvent(BaseModel):
    kind: Literal["prediction", "ras_trigger"]
    start_ts: int
    end_ts: int
    end_index: int
    label: int
    scores: List[float] = Field(default_factory=list)
    feature_us: float = 0.0
    inference_us: float = 0.0


class MemoryBudgetReport(BaseModel):
    ring_buffer_bytes: int
    feature_scratch_bytes: int
    inference_scratch_bytes: int
    model_bytes: int
    total_bytes: int
    budget_bytes: int = 8192
    passed: bool


class LatencySummary(BaseModel):
    feature_us_mean: Optional[float] = None
    inference_us_mean: Optional[float] = None
    total_us_mean: Optional[float] = None
    total_us_max: Optional[float] = None


class DetectionLatencyReport(BaseModel):
    n_episodes: int
    delays_s: List[Optional[float]] = Field(default_factory=list)
    mean_s: Optional[float] = None
    median_s: Optional[float] = None
    miss_rate: Optional[float] = None


class StreamSummary(BaseModel):
    source: str
    n_samples: int
    n_predictions: int
    n_triggers: int
    budget: MemoryBudgetReport
    latency: LatencySummary
    detection: Optional[DetectionLatencyReport] = None
    config: Dict[str, Any] = Field(default_factory=dict)
