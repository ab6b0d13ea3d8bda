"""
Decision tree and random forest baselines

CART induction (Gini, midpoint thresholds) comes from scikit-learn; the fitted
trees are flattened into node arrays that this module predicts with and
serializes as "TRE1" / "FRS1". The serialized length is the size metric.
"""

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.tree import DecisionTreeClassifier

from .errors import BadMagicError, FormatError, SchemaError, TrainingError, VersionMismatchError
from .metrics import balanced_recall
from .utils import ByteReader

logger = logging.getLogger(__name__)

TREE_MAGIC = b"TRE1"
FOREST_MAGIC = b"FRS1"
VERSION = 1
TREE_HEADER = "<4sHHH"
FOREST_HEADER = "<4sHHH"
LEAF = 0xFFFF
INTERNAL_RECORD = "<HfHH"
LEAF_RECORD = "<HBf"


@dataclass(frozen=True)
class DecisionTree:
    """Flat binary tree; node 0 is the root and leaves have feature == -1."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_class: np.ndarray
    leaf_prob: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())


@dataclass(frozen=True)
class RandomForest:
    trees: Tuple[DecisionTree, ...]
    feature_frac: float
    seed: int

    @property
    def n_features(self) -> int:
        return self.trees[0].n_features


def leaf_tree(cls: int, n_features: int, prob: float = 1.0) -> DecisionTree:
    return DecisionTree(
        feature=np.array([-1], dtype=np.int64),
        threshold=np.zeros(1),
        left=np.array([-1], dtype=np.int64),
        right=np.array([-1], dtype=np.int64),
        leaf_class=np.array([cls], dtype=np.int64),
        leaf_prob=np.array([prob]),
        n_features=n_features,
    )


def _from_sklearn(clf: DecisionTreeClassifier, n_features: int) -> DecisionTree:
    t = clf.tree_
    is_leaf = t.children_left < 0
    counts = t.value[:, 0, :]
    totals = counts.sum(axis=1)
    best = np.argmax(counts, axis=1)
    classes = clf.classes_.astype(np.int64)
    # thresholds stored as f32, the precision of the serialized form
    threshold = np.where(is_leaf, 0.0, t.threshold).astype(np.float32).astype(np.float64)
    return DecisionTree(
        feature=np.where(is_leaf, -1, t.feature).astype(np.int64),
        threshold=threshold,
        left=t.children_left.astype(np.int64),
        right=t.children_right.astype(np.int64),
        leaf_class=np.where(is_leaf, classes[best], 0),
        leaf_prob=np.where(is_leaf, counts[np.arange(len(best)), best] / totals, 0.0)
        .astype(np.float32).astype(np.float64),
        n_features=n_features,
    )


def _fit(
    X: np.ndarray,
    y: np.ndarray,
    max_depth: Optional[int],
    min_leaf: int,
    seed: int,
    max_features: Optional[float] = None,
) -> DecisionTree:
    if np.unique(y).size == 1:
        return leaf_tree(int(y[0]), X.shape[1])
    clf = DecisionTreeClassifier(
        criterion="gini",
        max_depth=max_depth,
        min_samples_leaf=min_leaf,
        max_features=max_features,
        random_state=seed,
    )
    clf.fit(X, y)
    return _from_sklearn(clf, X.shape[1])


def train_tree(
    X: np.ndarray,
    labels: np.ndarray,
    max_depth: Optional[int] = None,
    min_leaf: int = 1,
    seed: int = 0,
) -> DecisionTree:
    """Greedy Gini CART; all-constant features give a single-leaf tree."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if len(y) < min_leaf:
        raise TrainingError(f"{len(y)} window(s) is fewer than min_leaf={min_leaf}")
    if np.unique(y).size < 2:
        raise TrainingError("training labels contain a single class")
    return _fit(X, y, max_depth, min_leaf, seed)


def train_forest(
    X: np.ndarray,
    labels: np.ndarray,
    n_trees: int = 51,
    max_depth: Optional[int] = None,
    feature_frac: Optional[float] = None,
    seed: int = 0,
    min_leaf: int = 1,
    bootstrap: bool = True,
    workers: int = 1,
) -> RandomForest:
    """Bagged trees; tree i trains on the i-th bootstrap draw with seed `seed + i`.

    feature_frac (default sqrt(D)/D) is the share of features tried at every split.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if n_trees < 1:
        raise TrainingError(f"n_trees must be at least 1, got {n_trees}")
    if np.unique(y).size < 2:
        raise TrainingError("training labels contain a single class")
    n, D = X.shape
    frac = feature_frac if feature_frac is not None else np.sqrt(D) / D
    max_features = None if frac >= 1.0 else float(frac)

    rng = np.random.default_rng(seed)
    draws = [rng.integers(0, n, size=n) if bootstrap else np.arange(n) for _ in range(n_trees)]

    def fit(i: int) -> DecisionTree:
        idx = draws[i]
        return _fit(X[idx], y[idx], max_depth, min_leaf, seed + i, max_features)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        trees = tuple(pool.map(fit, range(n_trees)))
    return RandomForest(trees=trees, feature_frac=float(frac), seed=seed)


# --- Prediction ---

def check_width(X: np.ndarray, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    X2 = X[None, :] if X.ndim == 1 else X
    if X2.shape[1] != n_features:
        raise SchemaError(f"model expects {n_features} features, got {X2.shape[1]}")
    return X2


def leaf_indices(tree: DecisionTree, X: np.ndarray) -> np.ndarray:
    node = np.zeros(len(X), dtype=np.int64)
    rows = np.arange(len(X))
    active = tree.feature[node] >= 0
    while active.any():
        n = node[active]
        go_left = X[rows[active], tree.feature[n]] <= tree.threshold[n]
        node[active] = np.where(go_left, tree.left[n], tree.right[n])
        active = tree.feature[node] >= 0
    return node


def predict_tree(tree: DecisionTree, X: np.ndarray) -> np.ndarray:
    X2 = check_width(X, tree.n_features)
    out = tree.leaf_class[leaf_indices(tree, X2)]
    return out[0] if np.ndim(X) == 1 else out


def forest_votes(forest: RandomForest, X: np.ndarray) -> np.ndarray:
    """FoG votes per row."""
    X2 = check_width(X, forest.n_features)
    return np.sum([tree.leaf_class[leaf_indices(tree, X2)] for tree in forest.trees], axis=0)


def predict_forest(forest: RandomForest, X: np.ndarray) -> np.ndarray:
    """Majority vote; an even split goes to Normal."""
    votes = forest_votes(forest, X)
    out = (2 * votes > len(forest.trees)).astype(np.int64)
    return out[0] if np.ndim(X) == 1 else out


# --- Serialization ---

def serialize_tree(tree: DecisionTree) -> bytes:
    if tree.n_nodes > LEAF or tree.n_features >= LEAF:
        raise FormatError(f"TRE1: {tree.n_nodes} nodes / {tree.n_features} features exceed u16 range")
    parts = [struct.pack(TREE_HEADER, TREE_MAGIC, VERSION, tree.n_features, tree.n_nodes)]
    for i in range(tree.n_nodes):
        if tree.feature[i] < 0:
            parts.append(struct.pack(LEAF_RECORD, LEAF, int(tree.leaf_class[i]), float(tree.leaf_prob[i])))
        else:
            parts.append(struct.pack(
                INTERNAL_RECORD,
                int(tree.feature[i]),
                float(tree.threshold[i]),
                int(tree.left[i]),
                int(tree.right[i]),
            ))
    return b"".join(parts)


def _read_tree(reader: ByteReader) -> DecisionTree:
    magic, version, n_features, n_nodes = reader.unpack(TREE_HEADER)
    if magic != TREE_MAGIC:
        raise BadMagicError(f"expected magic {TREE_MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"TRE1 version {version}, this build reads {VERSION}")
    feature = np.full(n_nodes, -1, dtype=np.int64)
    threshold = np.zeros(n_nodes)
    left = np.full(n_nodes, -1, dtype=np.int64)
    right = np.full(n_nodes, -1, dtype=np.int64)
    leaf_class = np.zeros(n_nodes, dtype=np.int64)
    leaf_prob = np.zeros(n_nodes)
    for i in range(n_nodes):
        tag = reader.unpack("<H")[0]
        if tag == LEAF:
            leaf_class[i], leaf_prob[i] = reader.unpack("<Bf")
            continue
        threshold[i], left[i], right[i] = reader.unpack("<fHH")
        feature[i] = tag
        if tag >= n_features or max(left[i], right[i]) >= n_nodes:
            raise FormatError(f"TRE1: node {i} references a missing feature or child")
    return DecisionTree(feature, threshold, left, right, leaf_class, leaf_prob, n_features)


def deserialize_tree(payload: bytes) -> DecisionTree:
    reader = ByteReader(payload, "TRE1 tree")
    tree = _read_tree(reader)
    if reader.remaining:
        raise FormatError(f"TRE1: {reader.remaining} trailing bytes")
    return tree


def serialize_forest(forest: RandomForest) -> bytes:
    blobs = [serialize_tree(t) for t in forest.trees]
    header = struct.pack(FOREST_HEADER, FOREST_MAGIC, VERSION, forest.n_features, len(blobs))
    directory = struct.pack(f"<{len(blobs)}I", *(len(b) for b in blobs))
    return header + directory + b"".join(blobs)


def deserialize_forest(payload: bytes) -> RandomForest:
    reader = ByteReader(payload, "FRS1 forest")
    magic, version, n_features, n_trees = reader.unpack(FOREST_HEADER)
    if magic != FOREST_MAGIC:
        raise BadMagicError(f"expected magic {FOREST_MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"FRS1 version {version}, this build reads {VERSION}")
    if n_trees == 0:
        raise FormatError("FRS1: forest without trees")
    lengths = reader.unpack(f"<{n_trees}I")
    trees = tuple(deserialize_tree(reader.take(length)) for length in lengths)
    if reader.remaining:
        raise FormatError(f"FRS1: {reader.remaining} trailing bytes")
    if any(t.n_features != n_features for t in trees):
        raise FormatError("FRS1: trees disagree on the feature count")
    return RandomForest(trees=trees, feature_frac=float("nan"), seed=-1)


def tree_size_bytes(model) -> int:
    """Serialized length of a tree or forest, computed from node counts."""
    if isinstance(model, RandomForest):
        return (
            struct.calcsize(FOREST_HEADER)
            + 4 * len(model.trees)
            + sum(tree_size_bytes(t) for t in model.trees)
        )
    n_leaves = int(np.sum(model.feature < 0))
    return (
        struct.calcsize(TREE_HEADER)
        + n_leaves * struct.calcsize(LEAF_RECORD)
        + (model.n_nodes - n_leaves) * struct.calcsize(INTERNAL_RECORD)
    )


def inference_scratch_bytes(model) -> int:
    """Node cursor plus, for forests, the vote counter."""
    return 2 + (2 if isinstance(model, RandomForest) else 0)


# --- Size-constrained search ---

@dataclass(frozen=True)
class TreePoint:
    target_bytes: float
    size_bytes: int
    average_recall: float
    max_depth: Optional[int]
    min_leaf: int
    tree: DecisionTree


def tree_sweep(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    size_grid: Sequence[float],
    depths: Sequence[Optional[int]] = (1, 2, 3, 4, 5, 6, 7, 8, 10, 12, None),
    min_leafs: Sequence[int] = (1, 5, 20, 50),
    seed: int = 0,
) -> List[TreePoint]:
    """Depth/min-leaf pre-pruning grid; best validation average recall per size target."""
    fitted = []
    for depth in depths:
        for min_leaf in min_leafs:
            tree = train_tree(X_train, y_train, max_depth=depth, min_leaf=min_leaf, seed=seed)
            recall = balanced_recall(predict_tree(tree, X_val), y_val)
            fitted.append((tree_size_bytes(tree), recall, depth, min_leaf, tree))

    points = []
    for target in size_grid:
        fits = [(i, f) for i, f in enumerate(fitted) if f[0] <= target]
        if not fits:
            logger.warning(f"⚠️ no decision tree fits within {target} bytes; target skipped")
            continue
        _, (size, recall, depth, min_leaf, tree) = max(
            fits, key=lambda item: (item[1][1], -item[1][0], -item[0])
        )
        points.append(TreePoint(target, size, recall, depth, min_leaf, tree))
    return points
