"""
Fitted pipeline

Binds a feature subset, its normalization and a trained model of any family.
Batch evaluation, saved model files and the stream simulator all go through
this one object.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import ValidationError

from . import protonn, trees
from .errors import BadMagicError, ConfigError, FormatError, SchemaError
from .features import (
    FREQ_KINDS,
    FeatureDescriptor,
    FeatureMatrix,
    FeatureSubset,
    WindowSet,
    compute_features,
    normalize,
    parse_feature_spec,
    select_features,
)
from .models import RunConfig, Windowing
from .protonn import ProtoNNModel
from .threshold import (
    MAGIC as THRESHOLD_MAGIC,
    ThresholdDetector,
    deserialize_threshold,
    fit_threshold,
    predict_threshold,
    serialize_threshold,
    threshold_descriptors,
)
from .trees import DecisionTree, RandomForest

logger = logging.getLogger(__name__)

Model = Union[ProtoNNModel, DecisionTree, RandomForest, ThresholdDetector]

MANIFEST_SUFFIX = ".features"
WINDOWING_SUFFIX = ".window"
PREDICT_CHUNK = 2048


@dataclass(frozen=True)
class FittedPipeline:
    family: str
    subset: FeatureSubset
    model: Model
    fs: int = 64
    w: Optional[int] = None
    stride: Optional[int] = None

    @property
    def descriptors(self) -> Tuple[FeatureDescriptor, ...]:
        return self.subset.descriptors

    @property
    def has_spectral_features(self) -> bool:
        return any(d.kind in FREQ_KINDS for d in self.descriptors)

    @property
    def stats_digest(self) -> str:
        if isinstance(self.model, ProtoNNModel) and self.model.stats is not None:
            return self.model.stats.digest()
        return ""

    # --- inference ---

    def extract(self, batch: np.ndarray) -> np.ndarray:
        """Raw feature rows for a (b, 9, L) batch, in manifest order."""
        return compute_features(batch, self.descriptors, self.fs)

    def scores(self, values: np.ndarray) -> np.ndarray:
        """Per-class scores (Normal, FoG) for raw feature rows."""
        values = np.asarray(values, dtype=np.float64)
        if isinstance(self.model, ProtoNNModel):
            stats = self.model.stats
            x = stats.apply(values) if stats is not None else values
            return protonn.score(self.model, x)
        if isinstance(self.model, RandomForest):
            fog = trees.forest_votes(self.model, values) / len(self.model.trees)
        elif isinstance(self.model, DecisionTree):
            leaves = trees.leaf_indices(self.model, trees.check_width(values, self.model.n_features))
            p = self.model.leaf_prob[leaves]
            fog = np.where(self.model.leaf_class[leaves] == 1, p, 1.0 - p)
        else:
            fog = predict_threshold(self.model, values).astype(np.float64)
        return np.stack([1.0 - fog, fog], axis=-1)

    def predict_values(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if isinstance(self.model, ProtoNNModel):
            return np.argmax(self.scores(values), axis=-1)
        if isinstance(self.model, RandomForest):
            return trees.predict_forest(self.model, values)
        if isinstance(self.model, DecisionTree):
            return trees.predict_tree(self.model, values)
        return predict_threshold(self.model, values)

    def predict_matrix(self, matrix: FeatureMatrix) -> np.ndarray:
        return self.predict_values(matrix.select(self.descriptors).values)

    def predict_windows(self, windows: WindowSet) -> np.ndarray:
        out = np.empty(len(windows), dtype=np.int64)
        for lo in range(0, len(windows), PREDICT_CHUNK):
            idx = np.arange(lo, min(lo + PREDICT_CHUNK, len(windows)))
            out[idx] = self.predict_values(self.extract(windows.batch(idx)))
        return out

    # --- artifacts ---

    def serialize(self) -> bytes:
        if isinstance(self.model, ProtoNNModel):
            return protonn.serialize(self.model)
        if isinstance(self.model, RandomForest):
            return trees.serialize_forest(self.model)
        if isinstance(self.model, DecisionTree):
            return trees.serialize_tree(self.model)
        return serialize_threshold(self.model)

    @property
    def size_bytes(self) -> int:
        return len(self.serialize())

    @property
    def inference_scratch_bytes(self) -> int:
        if isinstance(self.model, ProtoNNModel):
            return protonn.inference_scratch_bytes(self.model)
        if isinstance(self.model, (DecisionTree, RandomForest)):
            return trees.inference_scratch_bytes(self.model)
        return 0

    def save(self, path: Union[str, Path]) -> Path:
        """Write the model binary and its feature manifest side by side."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.serialize())
        self.subset.save(manifest_path(path))
        if self.w is not None and self.stride is not None:
            record = Windowing(fs=self.fs, w=self.w, stride=self.stride).model_dump()
            windowing_path(path).write_text(yaml.safe_dump(record, sort_keys=False), encoding="utf-8")
        logger.info(f"💾 Saved {self.family} model to {path} ({self.size_bytes} bytes)")
        return path


def manifest_path(model_path: Union[str, Path]) -> Path:
    return Path(model_path).with_suffix(MANIFEST_SUFFIX)


def windowing_path(model_path: Union[str, Path]) -> Path:
    return Path(model_path).with_suffix(WINDOWING_SUFFIX)


def read_windowing(path: Union[str, Path]) -> Windowing:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return Windowing.model_validate(data or {})
    except (yaml.YAMLError, ValidationError) as exc:
        raise FormatError(f"{path}: unreadable windowing record ({exc})") from None


def load_pipeline(
    model_path: Union[str, Path],
    manifest: Optional[Union[str, Path, FeatureSubset]] = None,
    fs: int = 64,
) -> FittedPipeline:
    """Load a model file and check it against its feature manifest.

    The windowing record next to the model, when present, pins fs, w and stride.
    """
    payload = Path(model_path).read_bytes()
    if manifest is None:
        manifest = manifest_path(model_path)
    subset = manifest if isinstance(manifest, FeatureSubset) else FeatureSubset.load(manifest)

    windowing: Dict[str, Optional[int]] = {"fs": fs, "w": None, "stride": None}
    if windowing_path(model_path).exists():
        windowing.update(read_windowing(windowing_path(model_path)).model_dump())

    magic = payload[:4]
    if magic == protonn.MAGIC:
        model = protonn.deserialize(payload)
        if model.n_features != len(subset) or model.schema_digest != subset.digest():
            raise SchemaError(f"{model_path}: model was trained on a different feature manifest")
        return FittedPipeline("protonn", subset, model, **windowing)
    if magic in (trees.TREE_MAGIC, trees.FOREST_MAGIC):
        if magic == trees.TREE_MAGIC:
            family, model = "decision_tree", trees.deserialize_tree(payload)
        else:
            family, model = "random_forest", trees.deserialize_forest(payload)
        if model.n_features != len(subset):
            raise SchemaError(f"{model_path}: model expects {model.n_features} features, manifest lists {len(subset)}")
        return FittedPipeline(family, subset, model, **windowing)
    if magic == THRESHOLD_MAGIC:
        model = deserialize_threshold(payload)
        if tuple(subset.descriptors) != model.descriptors:
            raise SchemaError(f"{model_path}: manifest does not match the detector's channel {model.channel}")
        return FittedPipeline("fi_threshold", subset, model, **windowing)
    raise BadMagicError(f"{model_path}: unrecognised model magic {magic!r}")


# --- Fitting ---

def extraction_descriptors(config: RunConfig) -> Tuple[FeatureDescriptor, ...]:
    """Columns a run needs extracted before any per-fold selection."""
    if config.model == "fi_threshold":
        return threshold_descriptors(config.threshold.channel)
    return parse_feature_spec(config.features, config.channels).extract


def resolve_subset(train_matrix: FeatureMatrix, config: RunConfig) -> FeatureSubset:
    if config.model == "fi_threshold":
        return FeatureSubset(threshold_descriptors(config.threshold.channel))
    spec = parse_feature_spec(config.features, config.channels)
    if spec.select_k is not None:
        return select_features(
            train_matrix.select(spec.base),
            target_count=spec.select_k,
            corr_threshold=config.corr_threshold,
        )
    return FeatureSubset(spec.extract)


def fit_pipeline(train_matrix: FeatureMatrix, config: RunConfig, workers: int = 1) -> FittedPipeline:
    """Select features, normalize and train on training windows only."""
    subset = resolve_subset(train_matrix, config)
    matrix = train_matrix.select(subset.descriptors)
    X, y = matrix.values, matrix.labels

    if config.model == "protonn":
        normed = normalize(matrix)
        model: Model = protonn.train(
            normed.values, y, config.protonn, seed=config.seed,
            stats=normed.stats, schema_digest=subset.digest(),
        )
    elif config.model == "decision_tree":
        model = trees.train_tree(X, y, config.tree.max_depth, config.tree.min_leaf, seed=config.seed)
    elif config.model == "random_forest":
        f = config.forest
        model = trees.train_forest(
            X, y, n_trees=f.n_trees, max_depth=f.max_depth, feature_frac=f.feature_frac,
            seed=config.seed, min_leaf=f.min_leaf, bootstrap=f.bootstrap, workers=workers,
        )
    elif config.model == "fi_threshold":
        model = fit_threshold(X, y, config.threshold.channel, config.threshold.quantiles)
    else:
        raise ConfigError("model", f"unknown model family {config.model!r}")
    return FittedPipeline(config.model, subset, model, config.fs, config.w, config.stride)