"""
Experiment Harness

Cross-validated experiments, the size/recall sweep, the feature-set latency
study, sensor ablation and window-length tables. Feature selection and
normalization are always fitted on training windows only.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import stats as scipy_stats
from tqdm import tqdm

from .cache import read_cache
from .errors import ConfigError, DataError
from .features import (
    ALL_KINDS,
    CHANNELS,
    F_D,
    F_TD,
    SENSORS,
    TIME_KINDS,
    FeatureDescriptor,
    FeatureMatrix,
    WindowSet,
    compute_features,
    descriptor_grid,
    extract_matrix,
    normalize,
    select_features,
    window_cohort,
)
from .ingest import Cohort, assert_no_excluded, kfold, leave_one_subject_out, load_cohort, split
from .metrics import average_recall, confusion, recall_scores, sensitivity, specificity
from .models import (
    AblationRow,
    ConfusionCounts,
    EvalReport,
    FoldReport,
    LatencyRow,
    RecallScores,
    RunConfig,
    SweepRow,
    TimingStats,
    WindowRow,
)
from .pipeline import FittedPipeline, extraction_descriptors, fit_pipeline, resolve_subset
from .protonn import compress_sweep, predict_raw
from .trees import predict_tree, tree_sweep
from .utils import default_data_dir, time_per_call

logger = logging.getLogger(__name__)

__all__ = [
    "confusion",
    "sensitivity",
    "specificity",
    "average_recall",
    "run_experiment",
    "size_recall_sweep",
    "feature_latency_bench",
    "feature_subset_study",
    "sensor_ablation",
    "window_length_sweep",
]

Fold = Tuple[int, Optional[int], np.ndarray, np.ndarray]


# --- Data access ---

def load_dataset(config: RunConfig) -> Cohort:
    data_dir = config.data_dir or default_data_dir()
    if data_dir is None:
        raise ConfigError("data_dir", "no dataset directory given and FOG_DATA_DIR is unset")
    return load_cohort(data_dir, config.pattern, config.exclude_subjects, workers=max(4, config.workers))


def load_windows(config: RunConfig) -> WindowSet:
    """Windows from the cache when it matches the config, else from the corpus."""
    w = config.w
    if config.cache is not None and Path(config.cache).exists():
        windows, meta = read_cache(config.cache)
        if (windows.w, windows.fs, meta.stride, meta.label_rule) != (w, config.fs, config.stride, config.label_rule):
            raise ConfigError(
                "cache",
                f"{config.cache} holds w={windows.w} fs={windows.fs} stride={meta.stride} "
                f"rule={meta.label_rule}; the run asks for w={w} fs={config.fs} "
                f"stride={config.stride} rule={config.label_rule}",
            )
        excluded = np.isin(windows.subject_ids, config.exclude_subjects)
        if excluded.any():
            logger.info(f"🚫 Dropping {int(excluded.sum())} cached window(s) of excluded subjects")
            windows = windows.take(np.flatnonzero(~excluded))
        logger.info(f"📂 Loaded {len(windows)} windows from cache {config.cache}")
    else:
        cohort = load_dataset(config)
        windows = window_cohort(
            cohort, w, config.fs, config.stride, config.label_rule, config.include_subjects or None
        )
    assert_no_excluded(windows.subject_ids, config.exclude_subjects)
    if config.include_subjects:
        windows = windows.take(np.flatnonzero(np.isin(windows.subject_ids, config.include_subjects)))
    if len(windows) == 0:
        raise DataError("no windows available for the selected subjects")
    return windows


def fold_indices(config: RunConfig, labels: np.ndarray, subject_ids: np.ndarray) -> List[Fold]:
    """(fold number, held-out subject, train idx, validation idx) per fold."""
    if config.evaluation == "cv":
        return [(i, None, tr, va) for i, (tr, va) in enumerate(kfold(labels, config.folds, config.seed))]
    if config.evaluation == "holdout":
        tr, va = split(labels, config.split_ratio, config.seed)
        return [(0, None, tr, va)]
    return [(i, s, tr, va) for i, (s, tr, va) in enumerate(leave_one_subject_out(subject_ids))]


# --- Experiments ---

def evaluate_fold(
    matrix: FeatureMatrix,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    config: RunConfig,
    fold: int = 0,
    held_out: Optional[int] = None,
) -> Tuple[FoldReport, np.ndarray, FittedPipeline]:
    """Fit on the training rows only and score the validation rows."""
    pipeline = fit_pipeline(matrix.take(train_idx), config)
    val = matrix.take(val_idx)
    predictions = pipeline.predict_matrix(val)
    scores = recall_scores(confusion(predictions, val.labels))
    report = FoldReport(
        **scores.model_dump(),
        fold=fold,
        held_out_subject=held_out,
        n_train=len(train_idx),
        n_validation=len(val_idx),
        model_size_bytes=pipeline.size_bytes,
        features=pipeline.subset.names,
        stats_digest=pipeline.stats_digest,
    )
    return report, predictions, pipeline


def measure_timing(pipeline: FittedPipeline, windows: WindowSet, n_windows: int) -> TimingStats:
    """Per-window feature and inference wall time in microseconds."""
    n = min(n_windows, len(windows))
    if n == 0:
        return TimingStats()
    feature_us, inference_us = np.empty(n), np.empty(n)
    pipeline.predict_values(pipeline.extract(windows.batch(np.arange(1))))  # warm-up
    for i in range(n):
        batch = windows.batch(np.array([i]))
        t0 = time.perf_counter()
        values = pipeline.extract(batch)
        t1 = time.perf_counter()
        pipeline.predict_values(values)
        t2 = time.perf_counter()
        feature_us[i], inference_us[i] = (t1 - t0) * 1e6, (t2 - t1) * 1e6
    return TimingStats(
        feature_us_mean=float(feature_us.mean()),
        feature_us_p95=float(np.percentile(feature_us, 95)),
        feature_us_max=float(feature_us.max()),
        inference_us_mean=float(inference_us.mean()),
        inference_us_p95=float(np.percentile(inference_us, 95)),
        inference_us_max=float(inference_us.max()),
        n_windows=n,
    )


def run_experiment(
    config: RunConfig,
    windows: Optional[WindowSet] = None,
    matrix: Optional[FeatureMatrix] = None,
) -> EvalReport:
    """Evaluate one model family under the configured protocol (10-fold CV by default)."""
    if windows is None:
        windows = load_windows(config)
    needed = extraction_descriptors(config)
    if matrix is None:
        matrix = extract_matrix(windows, descriptors=needed)
    else:
        matrix = matrix.select(needed)

    folds = fold_indices(config, matrix.labels, matrix.subject_ids)
    logger.info(f"🎯 {config.model}: {config.evaluation} over {len(folds)} fold(s), {len(matrix)} windows")

    def run(fold: Fold) -> Tuple[FoldReport, np.ndarray, FittedPipeline]:
        number, held_out, train_idx, val_idx = fold
        return evaluate_fold(matrix, train_idx, val_idx, config, number, held_out)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(tqdm(pool.map(run, folds), total=len(folds), desc=config.model, leave=False))

    total = ConfusionCounts()
    predicted_subjects, predicted, truth = [], [], []
    for (_, _, _, val_idx), (report, predictions, _) in zip(folds, results):
        total = total + report.counts
        predicted_subjects.append(matrix.subject_ids[val_idx])
        predicted.append(predictions)
        truth.append(matrix.labels[val_idx])

    subjects = np.concatenate(predicted_subjects)
    predicted_all, truth_all = np.concatenate(predicted), np.concatenate(truth)
    per_subject = {
        str(int(s)): recall_scores(confusion(predicted_all[subjects == s], truth_all[subjects == s]))
        for s in np.unique(subjects)
    }

    last_pipeline = results[-1][2]
    timing = measure_timing(last_pipeline, windows.take(folds[-1][3]), config.timing_windows)
    overall = recall_scores(total)
    report = EvalReport(
        **overall.model_dump(),
        family=config.model,
        evaluation=config.evaluation,
        model_size_bytes=max(r.model_size_bytes for r, _, _ in results),
        folds=[r for r, _, _ in results],
        per_subject=per_subject,
        timing=timing,
        config=config.model_dump(mode="json"),
        config_hash=config.config_hash(),
        seed=config.seed,
        dataset_digest=windows.digest(),
    )
    logger.info(
        f"✅ {config.model}: sensitivity {_pct(report.sensitivity)}, specificity {_pct(report.specificity)}, "
        f"average recall {_pct(report.average_recall)}"
    )
    return report


def _pct(value: Optional[float]) -> str:
    return "undefined" if value is None else f"{100 * value:.2f}%"


# --- Size / recall sweep ---

def size_recall_sweep(
    config: RunConfig,
    size_grid: Sequence[float],
    windows: Optional[WindowSet] = None,
    families: Sequence[str] = ("protonn", "decision_tree"),
    out_dir: Optional[Union[str, Path]] = None,
) -> List[SweepRow]:
    """Best validation average recall per model-size target, on one stratified split."""
    targets = sorted(float(t) for t in size_grid)
    if not targets:
        return []
    if windows is None:
        windows = load_windows(config)
    protonn_config = config.with_overrides(model="protonn")
    matrix = extract_matrix(windows, descriptors=extraction_descriptors(protonn_config))
    train_idx, val_idx = split(matrix.labels, config.split_ratio, config.seed)
    train, val = matrix.take(train_idx), matrix.take(val_idx)

    subset = resolve_subset(train, protonn_config)
    train_sel, val_sel = train.select(subset.descriptors), val.select(subset.descriptors)
    rows: List[SweepRow] = []

    if "protonn" in families:
        train_n = normalize(train_sel)
        for p in compress_sweep(
            train_n, val_sel, targets, base=config.protonn, seed=config.seed,
            schema_digest=subset.digest(), workers=config.workers,
        ):
            scores = recall_scores(confusion(predict_raw(p.model, val_sel.values), val_sel.labels))
            rows.append(SweepRow(
                family="protonn",
                target_bytes=p.target_bytes,
                achieved_bytes=p.size_bytes,
                average_recall=scores.average_recall,
                sensitivity=scores.sensitivity,
                specificity=scores.specificity,
                hyper=p.hyper.model_dump(),
            ))

    if "decision_tree" in families:
        for p in tree_sweep(
            train_sel.values, train_sel.labels, val_sel.values, val_sel.labels, targets, seed=config.seed
        ):
            scores = recall_scores(confusion(predict_tree(p.tree, val_sel.values), val_sel.labels))
            rows.append(SweepRow(
                family="decision_tree",
                target_bytes=p.target_bytes,
                achieved_bytes=p.size_bytes,
                average_recall=scores.average_recall,
                sensitivity=scores.sensitivity,
                specificity=scores.specificity,
                hyper={"max_depth": p.max_depth, "min_leaf": p.min_leaf},
            ))

    if out_dir is not None:
        out = Path(out_dir)
        write_table(rows, out / "size_recall.csv")
        plot_size_recall(rows, out / "size_recall.svg")
    return rows


# --- Feature-set latency ---

def feature_latency_bench(
    windows_by_w: Mapping[int, WindowSet],
    fd: Sequence[FeatureDescriptor] = F_D,
    ftd: Sequence[FeatureDescriptor] = F_TD,
    n_windows: int = 1000,
    repeats: int = 5,
) -> List[LatencyRow]:
    """Mean per-window extraction time of two feature sets, median of `repeats` passes."""
    rows = []
    for w in sorted(windows_by_w):
        windows = windows_by_w[w]
        n = min(n_windows, len(windows))
        if n == 0:
            continue
        batches = [windows.batch(np.array([i])) for i in range(n)]

        def run(descriptors: Sequence[FeatureDescriptor]) -> Callable[[], None]:
            def once() -> None:
                for batch in batches:
                    compute_features(batch, descriptors, windows.fs)
            return once

        run(fd)()  # warm-up
        fd_us = time_per_call(run(fd), repeats) / n * 1e6
        ftd_us = time_per_call(run(ftd), repeats) / n * 1e6
        rows.append(LatencyRow(
            w=w, fd_us=fd_us, ftd_us=ftd_us, ratio=fd_us / ftd_us,
            n_fd=len(fd), n_ftd=len(ftd), n_windows=n,
        ))
        logger.info(f"⏱️ w={w}: F_d {fd_us:.1f} µs, F_td {ftd_us:.1f} µs, ratio {fd_us / ftd_us:.1f}")
    return rows


def latency_trend(rows: Sequence[LatencyRow]) -> Optional[float]:
    """R^2 of a linear fit of F_td time against w; None below three points."""
    if len(rows) < 3:
        return None
    fit = scipy_stats.linregress([r.w for r in rows], [r.ftd_us for r in rows])
    return float(fit.rvalue ** 2)


def feature_subset_study(
    config: RunConfig,
    cohort: Optional[Cohort] = None,
    w_values: Sequence[int] = (1, 2, 3, 4),
    k_d: int = 20,
    k_td: int = 12,
    n_windows: int = 1000,
    repeats: int = 5,
) -> List[LatencyRow]:
    """Time and score the selected subsets F_d and F_td at each window length.

    Both subsets are selected on the training side of the configured split and
    timed as selected; recall comes from run_experiment with the same selection
    sizes, re-selected inside every fold.
    """
    if cohort is None:
        cohort = load_dataset(config)
    full_grid = descriptor_grid(config.channels, ALL_KINDS)
    time_grid = descriptor_grid(config.channels, TIME_KINDS)

    rows = []
    for w in w_values:
        cfg = config.with_overrides(w=w, stride=min(config.stride, w * config.fs))
        windows = window_cohort(cohort, w, cfg.fs, cfg.stride, cfg.label_rule, cfg.include_subjects or None)
        if len(windows) == 0:
            continue
        matrix = extract_matrix(windows, descriptors=full_grid)
        train_idx, _ = split(matrix.labels, cfg.split_ratio, cfg.seed)
        train = matrix.take(train_idx)
        fd = select_features(train.select(full_grid), target_count=k_d, corr_threshold=cfg.corr_threshold)
        ftd = select_features(train.select(time_grid), target_count=k_td, corr_threshold=cfg.corr_threshold)

        timed = feature_latency_bench(
            {w: windows}, fd=fd.descriptors, ftd=ftd.descriptors, n_windows=n_windows, repeats=repeats
        )
        if not timed:
            continue
        fd_report = run_experiment(cfg.with_overrides(features=f"selected:{k_d}:F_D"), windows=windows, matrix=matrix)
        ftd_report = run_experiment(cfg.with_overrides(features=f"selected:{k_td}:F_TD"), windows=windows, matrix=matrix)
        rows.append(timed[0].model_copy(update={
            "fd_average_recall": fd_report.average_recall,
            "ftd_average_recall": ftd_report.average_recall,
            "fd_features": fd.names,
            "ftd_features": ftd.names,
        }))
        logger.info(
            f"📊 w={w}: F_d recall {_pct(fd_report.average_recall)}, F_td recall {_pct(ftd_report.average_recall)}"
        )
    return rows


# --- Sensor ablation / window-length tables ---

def sensor_subsets() -> List[Tuple[str, ...]]:
    """All seven nonempty combinations of ankle, leg and torso."""
    names = tuple(SENSORS)
    return [c for k in range(1, len(names) + 1) for c in combinations(names, k)]


def sensor_ablation(
    config: RunConfig,
    windows: Optional[WindowSet] = None,
    subsets: Optional[Iterable[Tuple[str, ...]]] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> List[AblationRow]:
    """run_experiment per sensor subset, everything else fixed."""
    if windows is None:
        windows = load_windows(config)
    full = extract_matrix(windows, descriptors=extraction_descriptors(config.with_overrides(channels=list(CHANNELS))))

    rows = []
    for subset in subsets or sensor_subsets():
        channels = [c for s in subset for c in SENSORS[s]]
        report = run_experiment(config.with_overrides(channels=channels), windows=windows, matrix=full)
        rows.append(AblationRow(
            counts=report.counts,
            sensitivity=report.sensitivity,
            specificity=report.specificity,
            average_recall=report.average_recall,
            sensors=list(subset),
            channels=[c for c in CHANNELS if c in channels],
        ))
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "sensor_ablation.csv")
        plot_ablation(rows, Path(out_dir) / "sensor_ablation.svg")
    return rows


def window_length_sweep(
    config: RunConfig,
    cohort: Optional[Cohort] = None,
    w_values: Sequence[int] = (1, 2, 3, 4),
) -> List[WindowRow]:
    """One run_experiment per window length."""
    if cohort is None:
        cohort = load_dataset(config)
    rows = []
    for w in w_values:
        cfg = config.with_overrides(w=w, stride=min(config.stride, w * config.fs))
        windows = window_cohort(cohort, w, cfg.fs, cfg.stride, cfg.label_rule, cfg.include_subjects or None)
        report = run_experiment(cfg, windows=windows)
        rows.append(WindowRow(
            counts=report.counts,
            sensitivity=report.sensitivity,
            specificity=report.specificity,
            average_recall=report.average_recall,
            w=w,
            family=cfg.model,
            model_size_bytes=report.model_size_bytes,
        ))
    return rows


# --- Outputs ---

def write_report(report: BaseModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path


def read_report(path: Union[str, Path], model: type = EvalReport) -> BaseModel:
    return model.model_validate_json(Path(path).read_text(encoding="utf-8"))


def table_frame(rows: Sequence[BaseModel]) -> pd.DataFrame:
    """Flat table; nested confusion counts become tp/tn/fp/fn columns."""
    records = []
    for row in rows:
        record = row.model_dump(mode="json")
        counts = record.pop("counts", None)
        if counts:
            record.update(counts)
        for key, value in list(record.items()):
            if isinstance(value, (list, dict)):
                record[key] = "+".join(map(str, value)) if isinstance(value, list) else str(value)
        records.append(record)
    return pd.DataFrame.from_records(records)


def write_table(rows: Sequence[BaseModel], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table_frame(rows).to_csv(path, index=False)
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_size_recall(rows: Sequence[SweepRow], path: Union[str, Path]) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for family in sorted({r.family for r in rows}):
        points = sorted((r.achieved_bytes, r.average_recall) for r in rows if r.family == family)
        ax.plot([p[0] / 1024 for p in points], [100 * (p[1] or 0) for p in points], marker="o", label=family)
    ax.set_xlabel("Model size (KB)")
    ax.set_ylabel("Average recall (%)")
    ax.set_xscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_ablation(rows: Sequence[AblationRow], path: Union[str, Path]) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = ["+".join(s[0].upper() for s in r.sensors) for r in rows]
    ax.bar(labels, [100 * (r.average_recall or 0) for r in rows])
    ax.set_xlabel("Sensors")
    ax.set_ylabel("Average recall (%)")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def per_subject_table(report: EvalReport) -> pd.DataFrame:
    return table_frame([
        RecallScores(**scores.model_dump()) for scores in report.per_subject.values()
    ]).assign(subject=list(report.per_subject))
