"""
Windowed cache ("FOGW")

Columnar little-endian file holding a WindowSet: the pooled f32 samples plus
per-window start, label, subject and timestamp columns, closed by a SHA-256
of everything before it. See docs/formats.md for the layout.
"""

import hashlib
import logging
import struct
from pathlib import Path
from typing import NamedTuple, Tuple, Union

import numpy as np

from .errors import BadMagicError, FormatError, VersionMismatchError
from .features import WindowSet
from .utils import ByteReader

logger = logging.getLogger(__name__)

MAGIC = b"FOGW"
VERSION = 1
HEADER = "<4sHHHHBBQI"
LABEL_RULES = ("majority", "any")


class CacheMeta(NamedTuple):
    stride: int
    label_rule: str
    digest: str


def encode_windows(windows: WindowSet, stride: int, label_rule: str = "majority") -> bytes:
    samples = np.ascontiguousarray(windows.samples, dtype="<f4")
    header = struct.pack(
        HEADER,
        MAGIC,
        VERSION,
        windows.fs,
        windows.w,
        stride,
        samples.shape[1],
        LABEL_RULES.index(label_rule),
        samples.shape[0],
        len(windows),
    )
    body = b"".join([
        header,
        samples.tobytes(),
        windows.starts.astype("<u8").tobytes(),
        windows.labels.astype("u1").tobytes(),
        windows.subject_ids.astype("<i2").tobytes(),
        windows.start_ts.astype("<i8").tobytes(),
    ])
    return body + hashlib.sha256(body).digest()


def decode_windows(payload: bytes) -> Tuple[WindowSet, CacheMeta]:
    reader = ByteReader(payload, "window cache")
    magic, version, fs, w, stride, n_channels, rule, n_samples, n_windows = reader.unpack(HEADER)
    if magic != MAGIC:
        raise BadMagicError(f"window cache: expected magic {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"window cache: version {version}, this build reads {VERSION}")
    if rule >= len(LABEL_RULES):
        raise FormatError(f"window cache: unknown label rule code {rule}")

    samples = reader.array("<f4", n_samples * n_channels).reshape(n_samples, n_channels)
    starts = reader.array("<u8", n_windows).astype(np.int64)
    labels = reader.array("u1", n_windows).astype(np.int8)
    subject_ids = reader.array("<i2", n_windows).astype(np.int32)
    start_ts = reader.array("<i8", n_windows)
    body_len = reader.offset
    digest = reader.take(32)
    if digest != hashlib.sha256(payload[:body_len]).digest():
        raise FormatError("window cache: checksum mismatch")
    if reader.remaining:
        raise FormatError(f"window cache: {reader.remaining} trailing bytes")

    windows = WindowSet(
        samples=samples,
        starts=starts,
        labels=labels,
        subject_ids=subject_ids,
        start_ts=start_ts,
        w=w,
        fs=fs,
    )
    return windows, CacheMeta(stride=stride, label_rule=LABEL_RULES[rule], digest=digest.hex())


def write_cache(windows: WindowSet, path: Union[str, Path], stride: int, label_rule: str = "majority") -> str:
    """Write the cache; returns its hex digest."""
    payload = encode_windows(windows, stride, label_rule)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(payload)
    logger.info(f"💾 Wrote {len(windows)} windows to {path} ({len(payload)} bytes)")
    return payload[-32:].hex()


def read_cache(path: Union[str, Path]) -> Tuple[WindowSet, CacheMeta]:
    return decode_windows(Path(path).read_bytes())
