from dataclasses import asdict, fields
import hashlib
import json
import logging
import os
from pathlib import Path
import sys
from typing import Iterable

import numpy as np
import pandas as pd
import structlog
from PIL import Image, UnidentifiedImageError

from .exceptions import ConfigError, DatasetError

logger = structlog.get_logger(__name__)

THREADS_ENV = "MAXMIN_WSL_THREADS"


def configure_logging(level: str = "info", json_logs: bool = False) -> None:
    """
    Configure structlog for the process. Logs go to stderr; stdout is kept for command results.
    """
    renderer = structlog.processors.JSONRenderer() if json_logs else structlog.dev.ConsoleRenderer(colors=False)
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(logging.getLevelName(level.upper())),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def worker_count() -> int:
    """Worker threads allowed by MAXMIN_WSL_THREADS (default 1)."""
    raw = os.getenv(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    if count < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    return count


# === 8-bit images ===

def write_image(path: Path, values: np.ndarray) -> None:
    """
    Write an 8-bit grid as binary PGM (H x W) or PPM (C x H x W with C == 3).
    """
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        raise ValueError(f"write_image expects uint8 data, got {arr.dtype}")
    if arr.ndim == 3:
        if arr.shape[0] == 1:
            arr = arr[0]
        elif arr.shape[0] == 3:
            arr = np.ascontiguousarray(arr.transpose(1, 2, 0))
        else:
            raise ValueError(f"Only 1 or 3 channels can be written, got {arr.shape[0]}")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PPM")


def read_image(path: Path, record: str | None = None) -> np.ndarray:
    """Read a PGM/PPM file as uint8, channels first for colour images."""
    if not path.is_file():
        raise DatasetError(f"Missing file {path}" + (f" (record {record})" if record else ""), record=record or str(path))
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise DatasetError(f"Corrupt image {path}" + (f" (record {record})" if record else "") + f": {e}",
                           record=record or str(path)) from e
    if arr.dtype != np.uint8:
        raise DatasetError(f"Image {path} is not 8-bit", record=record or str(path))
    return arr.transpose(2, 0, 1) if arr.ndim == 3 else arr


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


# === tabular and text outputs ===

def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def files_sha256(paths: Iterable[Path]) -> str:
    """One digest over the contents of several files, in the given order."""
    digest = hashlib.sha256()
    for path in paths:
        digest.update(file_sha256(path).encode())
    return digest.hexdigest()


def records_frame(records: Iterable, record_type: type | None = None) -> pd.DataFrame:
    """One row per dataclass record; ``record_type`` fixes the columns of an empty log."""
    rows = [asdict(r) for r in records]
    columns = [f.name for f in fields(record_type)] if record_type is not None else None
    return pd.DataFrame(rows, columns=columns)


def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
