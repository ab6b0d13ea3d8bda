#!/usr/bin/env python3
"""
Command-line front end

    fogsense [--config FILE] [--log-level LEVEL] COMMAND [OPTIONS]

Flags override values from the YAML config file; FOG_DATA_DIR (or a `.env`
file) supplies the default dataset directory. Progress goes to standard
error, machine-readable results to standard output and the output directory.

Exit codes: 0 ok, 1 unexpected failure, 2 usage error, 3 invalid config,
4 data/parse error, 5 unreadable binary file, 6 training failure.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
import yaml
from pydantic import ValidationError

from . import __version__
from .cache import read_cache, write_cache
from .errors import ConfigError, FogError
from .evaluation import (
    feature_subset_study,
    latency_trend,
    load_dataset,
    load_windows,
    per_subject_table,
    run_experiment,
    sensor_ablation,
    size_recall_sweep,
    window_length_sweep,
    write_report,
    write_table,
)
from .features import extract_matrix, window_cohort
from .ingest import episode_summary, load_daphnet_file
from .models import RunConfig, StreamConfig, config_error_from
from .pipeline import extraction_descriptors, fit_pipeline, load_pipeline
from .stream import (
    batch_labels,
    budget_check,
    memory_budget,
    replay_cache,
    run_stream,
    simulate,
    simulate_cache,
)
from .utils import DATA_DIR_ENV, default_data_dir, setup_logging

logger = logging.getLogger(__name__)

REQUIRED_PACKAGES = {
    "numpy": "numpy",
    "scipy": "scipy",
    "pandas": "pandas",
    "scikit-learn": "sklearn",
    "matplotlib": "matplotlib",
    "pydantic": "pydantic",
    "python-dotenv": "dotenv",
    "PyYAML": "yaml",
    "click": "click",
    "tqdm": "tqdm",
}


def load_config(config_path: Optional[str]) -> Dict[str, Any]:
    """Load configuration from YAML file."""
    if config_path is None:
        return {}
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError("config", f"file {config_path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"{config_path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", f"{config_path} must hold a mapping")
    return data


def _ints(value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from None


def _strs(value: Optional[str]) -> Optional[List[str]]:
    return None if value is None else [v.strip() for v in value.split(",") if v.strip()]


def parse_size(token: str) -> float:
    """'1.4k' -> 1434 bytes; 'inf' for an unconstrained target."""
    token = token.strip().lower()
    if token in ("inf", "unlimited"):
        return float("inf")
    scale = 1024 if token.endswith("k") else 1
    try:
        return float(round(float(token.rstrip("kb") or "x") * scale))
    except ValueError:
        raise click.BadParameter(f"bad size {token!r}") from None


def build_config(ctx: click.Context, **flags: Any) -> RunConfig:
    """File values, then flags; the dataset directory falls back to FOG_DATA_DIR."""
    data = {k: v for k, v in ctx.obj["file"].items() if k != "logging"}
    config = RunConfig.from_mapping(data)
    overrides = {
        "data_dir": flags.get("data"),
        "cache": flags.get("cache"),
        "w": flags.get("w"),
        "stride": flags.get("stride"),
        "features": flags.get("features"),
        "channels": _strs(flags.get("channels")),
        "model": flags.get("model"),
        "seed": flags.get("seed"),
        "evaluation": flags.get("evaluation"),
        "folds": flags.get("folds"),
        "workers": flags.get("workers"),
        "include_subjects": _ints(flags.get("include")),
        "exclude_subjects": _ints(flags.get("exclude")),
        "output_dir": flags.get("out_dir"),
    }
    config = config.with_overrides(**overrides)
    if config.data_dir is None:
        config = config.with_overrides(data_dir=default_data_dir())
    return config


def run_options(f):
    """Flags shared by every experiment command."""
    options = [
        click.option("--data", type=click.Path(path_type=Path), help=f"DAPHNet directory (default ${DATA_DIR_ENV})"),
        click.option("--cache", type=click.Path(path_type=Path), help="Windowed cache written by `ingest`"),
        click.option("--w", type=int, help="Window length in seconds"),
        click.option("--stride", type=int, help="Hop between windows in samples"),
        click.option("--features", help="F_D | F_TD | selected:<k>[:F_D|:F_TD] | manifest:<path>"),
        click.option("--channels", help="Comma-separated channels or sensors (ankle, leg, torso)"),
        click.option("--model", type=click.Choice(["protonn", "decision_tree", "random_forest", "fi_threshold"])),
        click.option("--seed", type=int),
        click.option("--evaluation", type=click.Choice(["cv", "holdout", "loso"])),
        click.option("--folds", type=int),
        click.option("--workers", type=int),
        click.option("--include", help="Comma-separated subject ids to keep"),
        click.option("--exclude", help="Comma-separated subject ids to drop"),
        click.option("--out-dir", type=click.Path(path_type=Path), help="Where artifacts are written"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def echo_json(payload: Any) -> None:
    click.echo(json.dumps(payload, indent=2, default=str))


@click.group()
@click.option("--config", "config_path", type=click.Path(), help="YAML configuration file")
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.version_option(__version__)
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], log_level: Optional[str]):
    """Resource-budgeted Freezing-of-Gait detection toolkit."""
    file_config = load_config(config_path)
    logging_config = dict(file_config.get("logging") or {})
    if log_level:
        logging_config["level"] = log_level
    setup_logging(logging_config)
    ctx.obj = {"file": file_config}


@cli.command()
@click.option("--data", type=click.Path(path_type=Path), help=f"DAPHNet directory (default ${DATA_DIR_ENV})")
@click.option("--out", "out", type=click.Path(path_type=Path), required=True, help="Cache file to write")
@click.option("--w", type=int)
@click.option("--stride", type=int)
@click.pass_context
def ingest(ctx: click.Context, data: Optional[Path], out: Path, w: Optional[int], stride: Optional[int]):
    """Parse the corpus into a windowed cache and summarize FoG episodes."""
    config = build_config(ctx, data=data, w=w, stride=stride)
    cohort = load_dataset(config)
    summary = episode_summary(cohort, config.fs)
    logger.info(f"🦶 {summary.count} FoG episodes, mean duration {summary.mean_s or 0:.2f} s")
    windows = window_cohort(
        cohort, config.w, config.fs, config.stride, config.label_rule, config.include_subjects or None
    )
    digest = write_cache(windows, out, config.stride, config.label_rule)
    echo_json({
        "episodes": summary.model_dump(),
        "windows": len(windows),
        "fog_windows": int(windows.labels.sum()),
        "cache": str(out),
        "digest": digest,
    })


@cli.command()
@run_options
@click.option("--out", "out", type=click.Path(path_type=Path), help="Model file (default <out-dir>/model.bin)")
@click.pass_context
def train(ctx: click.Context, out: Optional[Path], **flags):
    """Fit one model on every selected window and save it with its manifest."""
    config = build_config(ctx, **flags)
    windows = load_windows(config)
    matrix = extract_matrix(windows, descriptors=extraction_descriptors(config))
    pipeline = fit_pipeline(matrix, config, workers=config.workers)
    path = pipeline.save(out or config.output_dir / "model.bin")
    echo_json({
        "model": str(path),
        "family": pipeline.family,
        "size_bytes": pipeline.size_bytes,
        "features": pipeline.subset.names,
        "config_hash": config.config_hash(),
    })


@cli.command(name="eval")
@run_options
@click.pass_context
def eval_cmd(ctx: click.Context, **flags):
    """Cross-validated experiment; writes report.json and per_subject.csv."""
    config = build_config(ctx, **flags)
    report = run_experiment(config)
    out = config.output_dir
    write_report(report, out / "report.json")
    per_subject_table(report).to_csv(out / "per_subject.csv", index=False)
    echo_json({
        "family": report.family,
        "sensitivity": report.sensitivity,
        "specificity": report.specificity,
        "average_recall": report.average_recall,
        "model_size_bytes": report.model_size_bytes,
        "report": str(out / "report.json"),
    })


@cli.command()
@run_options
@click.option("--ws", default="1,2,3,4", show_default=True, help="Window lengths in seconds")
@click.pass_context
def tables(ctx: click.Context, ws: str, **flags):
    """Recall per window length (one experiment per w)."""
    config = build_config(ctx, **flags)
    rows = window_length_sweep(config, load_dataset(config), _ints(ws))
    write_table(rows, config.output_dir / "window_lengths.csv")
    echo_json([r.model_dump(mode="json") for r in rows])


@cli.command(name="sweep-size")
@run_options
@click.option("--grid", default="1.4k,3k,8k,32k", show_default=True, help="Size targets (bytes, k = KiB)")
@click.pass_context
def sweep_size(ctx: click.Context, grid: str, **flags):
    """Best average recall per model-size target for ProtoNN and the decision tree."""
    config = build_config(ctx, **flags)
    rows = size_recall_sweep(config, [parse_size(t) for t in grid.split(",")], out_dir=config.output_dir)
    echo_json([r.model_dump(mode="json", exclude={"hyper"}) for r in rows])


@cli.command(name="ablate-sensors")
@run_options
@click.pass_context
def ablate_sensors(ctx: click.Context, **flags):
    """Average recall for each of the seven sensor combinations."""
    config = build_config(ctx, **flags)
    rows = sensor_ablation(config, out_dir=config.output_dir)
    echo_json([r.model_dump(mode="json") for r in rows])


@cli.command(name="bench-features")
@run_options
@click.option("--ws", default="1,2,3,4", show_default=True)
@click.option("--k-d", type=int, default=20, show_default=True, help="Features kept from F_D")
@click.option("--k-td", type=int, default=12, show_default=True, help="Features kept from F_TD")
@click.option("--n-windows", type=int, default=1000, show_default=True)
@click.pass_context
def bench_features(ctx: click.Context, ws: str, k_d: int, k_td: int, n_windows: int, **flags):
    """Extraction time and average recall of the selected subsets F_d and F_td."""
    config = build_config(ctx, **flags)
    rows = feature_subset_study(
        config, load_dataset(config), w_values=_ints(ws), k_d=k_d, k_td=k_td, n_windows=n_windows
    )
    write_table(rows, config.output_dir / "feature_latency.csv")
    r2 = latency_trend(rows)
    if r2 is not None:
        logger.info(f"📈 F_td time vs w: R² = {r2:.3f}")
    echo_json({"rows": [r.model_dump() for r in rows], "ftd_linear_r2": r2})


@cli.command(name="simulate")
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--recording", type=click.Path(exists=True, path_type=Path), multiple=True,
              help="DAPHNet recording(s) to replay")
@click.option("--cache", type=click.Path(exists=True, path_type=Path), help="Windowed cache to replay")
@click.option("--w", type=int, help="Window length in seconds (default: the model's)")
@click.option("--stride", type=int, help="Hop in samples (default: the model's)")
@click.option("--debounce", type=float, default=1.0, show_default=True, help="Minimum trigger gap in windows")
@click.option("--verify", is_flag=True, help="Check stream labels against the batch pipeline")
@click.option("--out-dir", type=click.Path(path_type=Path), default=Path("runs/stream"), show_default=True)
@click.pass_context
def simulate_cmd(ctx, model_path: Path, recording: Sequence[Path], cache: Optional[Path], w: Optional[int],
                 stride: Optional[int], debounce: float, verify: bool, out_dir: Path):
    """Replay recordings or a windowed cache through the fixed-memory streaming pipeline."""
    if not recording and cache is None:
        raise click.UsageError("give --recording or --cache")
    pipeline = load_pipeline(model_path)
    config = _stream_config(
        fs=pipeline.fs,
        w=w or pipeline.w or 2,
        stride=stride or pipeline.stride or 32,
        manifest=pipeline.subset.names,
        debounce_windows=debounce,
    )
    summaries = []
    for path in recording:
        samples = load_daphnet_file(path)
        summary = simulate(samples, pipeline, config, out_dir / Path(path).stem)
        record = summary.model_dump(mode="json", exclude={"config"})
        if verify:
            stream_labels = run_stream(samples, pipeline, config).labels
            record["batch_equal"] = bool((stream_labels == batch_labels(samples, pipeline, config)).all())
        summaries.append(record)
    if cache is not None:
        windows, meta = read_cache(cache)
        summary = simulate_cache(windows, meta.stride, pipeline, config, str(cache), out_dir / cache.stem)
        record = summary.model_dump(mode="json", exclude={"config"})
        if verify:
            stream_labels = replay_cache(windows, meta.stride, pipeline, config).labels
            record["batch_equal"] = bool((stream_labels == pipeline.predict_windows(windows)).all())
        summaries.append(record)
    echo_json(summaries)


@cli.command()
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path),
              help="Trained model (its manifest sits next to it)")
@click.option("--model-bytes", type=int, help="Model size when no model file is given")
@click.option("--features", default="F_TD", show_default=True, help="F_D or F_TD when no model file is given")
@click.option("--n-features", type=int, help="Feature count when no model file is given")
@click.option("--w", type=int, help="Window length in seconds (default: the model's, else 2)")
@click.option("--stride", type=int, help="Hop in samples (default: the model's, else 32)")
@click.option("--budget-bytes", type=int, default=8192, show_default=True)
def budget(model_path, model_bytes, features, n_features, w, stride, budget_bytes):
    """Analytic working-set accounting against the SRAM budget."""
    if model_path is not None:
        pipeline = load_pipeline(model_path)
        config = _stream_config(
            fs=pipeline.fs, w=w or pipeline.w or 2, stride=stride or pipeline.stride or 32, budget_bytes=budget_bytes
        )
        report = budget_check(config, pipeline)
    else:
        if model_bytes is None:
            raise click.UsageError("give --model or --model-bytes")
        config = _stream_config(w=w or 2, stride=stride or 32, budget_bytes=budget_bytes)
        spectral = features.upper() == "F_D"
        default_count = 90 if spectral else 45
        report = memory_budget(config, n_features or default_count, spectral, model_bytes)
    echo_json(report.model_dump())


@cli.command()
@click.option("--data", type=click.Path(path_type=Path), help=f"DAPHNet directory (default ${DATA_DIR_ENV})")
def check(data: Optional[Path]):
    """Check that required packages import and the dataset directory exists."""
    missing = []
    for package, import_name in REQUIRED_PACKAGES.items():
        try:
            __import__(import_name)
        except ImportError:
            missing.append(package)
    if missing:
        click.echo("❌ Missing Python packages:", err=True)
        for package in missing:
            click.echo(f"   - {package}", err=True)
        click.echo("\n💡 Install with: poetry install", err=True)
    else:
        click.echo("✅ All Python packages available", err=True)

    data_dir = data or default_data_dir()
    data_ok = data_dir is not None and Path(data_dir).is_dir()
    if data_ok:
        click.echo(f"✅ Dataset directory {data_dir}", err=True)
    else:
        click.echo(f"⚠️ Dataset directory not found (set ${DATA_DIR_ENV} or pass --data)", err=True)
    echo_json({"missing_packages": missing, "data_dir": str(data_dir) if data_dir else None, "data_ok": data_ok})
    if missing:
        sys.exit(1)


def _stream_config(**values: Any) -> StreamConfig:
    try:
        return StreamConfig(**values)
    except ValidationError as exc:
        raise config_error_from(exc) from None


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Console entry point; maps errors to exit codes."""
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="fogsense", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except FogError as exc:
        logger.debug("failure detail", exc_info=True)
        click.echo(f"❌ {type(exc).__name__}: {exc}", err=True)
        sys.exit(exc.exit_code)
    except Exception as exc:
        logger.exception(f"❌ Unexpected error: {exc}")
        sys.exit(1)
    sys.exit(rv if isinstance(rv, int) else 0)


if __name__ == "__main__":
    main()
