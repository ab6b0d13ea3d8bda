"""
Utility Functions

Logging setup, hashing, binary-buffer reading and timing helpers shared across modules.
"""

import hashlib
import json
import logging
import os
import struct
import time
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import numpy as np
from dotenv import load_dotenv

from .errors import TruncatedError

DATA_DIR_ENV = "FOG_DATA_DIR"

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(config: Optional[Dict[str, Any]] = None) -> None:
    """Setup logging configuration."""
    config = config or {}
    level = config.get("level", "INFO")
    logging.basicConfig(
        level=getattr(logging, str(level).upper()),
        format=config.get("format", LOG_FORMAT),
    )
    # Silence overly verbose third-party loggers
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)


def default_data_dir() -> Optional[Path]:
    """Dataset directory from the environment (a `.env` next to the CWD is honoured)."""
    load_dotenv(Path.cwd() / ".env")
    value = os.getenv(DATA_DIR_ENV)
    return Path(value) if value else None


def sha256_hex(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def array_digest(*arrays: np.ndarray) -> str:
    """SHA-256 over the raw little-endian bytes of several arrays."""
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.dtype.str).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class ByteReader:
    """Cursor over a bytes buffer that raises TruncatedError on short reads."""

    def __init__(self, payload: bytes, what: str = "buffer"):
        self.payload = payload
        self.offset = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.offset + n > len(self.payload):
            raise TruncatedError(
                f"{self.what}: need {n} bytes at offset {self.offset}, "
                f"only {len(self.payload) - self.offset} left"
            )
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    @property
    def remaining(self) -> int:
        return len(self.payload) - self.offset


def time_per_call(fn: Callable[[], Any], repeats: int = 5) -> float:
    """Median wall time in seconds of `repeats` calls (monotonic clock)."""
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples))
