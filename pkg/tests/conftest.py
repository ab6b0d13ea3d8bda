"""
Shared fixtures: synthetic DAPHNet-format recordings

Normal gait is a 1.5 Hz swing, freezing a weaker 5.5 Hz tremble, so FoG
windows carry freeze-band power and a smaller amplitude. Files follow the
corpus naming (S01R01.txt ...).
"""

import os
from pathlib import Path

import numpy as np
import pytest

from fogsense.features import window_cohort
from fogsense.ingest import SampleStream, load_cohort, serialize_daphnet

FS = 64
WALK_HZ = 1.5
FOG_HZ = 5.5


def synthetic_recording(
    subject: int = 1,
    run: int = 1,
    n_samples: int = 7680,
    fog_spans=((2000, 2640), (5000, 5512)),
    debrief_spans=(),
    seed: int = 0,
    walk_amp: float = 400.0,
    fog_amp: float = 150.0,
    noise: float = 20.0,
) -> SampleStream:
    rng = np.random.default_rng(seed + 100 * subject + run)
    t = np.arange(n_samples) / FS
    labels = np.ones(n_samples, dtype=np.int8)
    for a, b in fog_spans:
        labels[a:b] = 2
    for a, b in debrief_spans:
        labels[a:b] = 0

    phase = rng.uniform(0.0, 2 * np.pi, size=9)
    walk = walk_amp * np.sin(2 * np.pi * WALK_HZ * t[:, None] + phase)
    fog = fog_amp * np.sin(2 * np.pi * FOG_HZ * t[:, None] + phase)
    accel = np.where((labels == 2)[:, None], fog, walk) + rng.normal(0.0, noise, size=(n_samples, 9))
    accel[:, [1, 4, 7]] += 1000.0  # gravity on the vertical axes

    return SampleStream(
        timestamps=np.round(np.arange(n_samples) * 1000 / FS).astype(np.int64) + 15,
        accel=np.round(accel).astype(np.int32),
        labels=labels,
        subject_id=subject,
        run_id=run,
        source=f"S{subject:02d}R{run:02d}.txt",
    )


def pytest_collection_modifyitems(config, items):
    """Skip `dataset` tests unless FOG_DATA_DIR points at the corpus."""
    data_dir = os.getenv("FOG_DATA_DIR")
    if data_dir and Path(data_dir).is_dir():
        return
    skip = pytest.mark.skip(reason="FOG_DATA_DIR does not point at the DAPHNet corpus")
    for item in items:
        if "dataset" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def make_recording():
    return synthetic_recording


@pytest.fixture
def recording():
    return synthetic_recording()


@pytest.fixture
def daphnet_dir(tmp_path):
    """Four subjects; subject 4 never freezes and is excluded by default."""
    recordings = [
        synthetic_recording(1, 1, debrief_spans=((0, 192), (3500, 3700))),
        synthetic_recording(2, 1, fog_spans=((1200, 1900), (4100, 4500), (6000, 6600))),
        synthetic_recording(3, 1, n_samples=5120, fog_spans=((2500, 3300),)),
        synthetic_recording(3, 2, n_samples=3840, fog_spans=((1000, 1400),)),
        synthetic_recording(4, 1, n_samples=3840, fog_spans=()),
    ]
    data_dir = tmp_path / "dataset"
    data_dir.mkdir()
    for rec in recordings:
        (data_dir / rec.source).write_text(serialize_daphnet(rec), encoding="utf-8")
    (data_dir / "README.txt").write_text("not a recording\n", encoding="utf-8")
    return data_dir


@pytest.fixture
def cohort(daphnet_dir):
    return load_cohort(daphnet_dir)


@pytest.fixture
def windows(cohort):
    return window_cohort(cohort, w=2, fs=FS, stride=32)
