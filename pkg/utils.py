"""Utility functions shared by the pipeline stages, the run store and the dashboard."""
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from errors import StorageError

logger = logging.getLogger(__name__)


def read_json(filepath: str, default: Any = None) -> Any:
    """Read and parse a JSON file. Returns `default` if the file doesn't exist."""
    if not os.path.exists(filepath):
        return default
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (json.JSONDecodeError, IOError) as exc:
        raise StorageError(f"Cannot read {filepath}: {exc}", {"path": filepath}) from exc


def dump_json(data: Any) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=True) + "\n"


def write_json(filepath: str, data: Any) -> str:
    """Write data to a JSON file and return the SHA-256 of the written text."""
    text = dump_json(data)
    try:
        parent = os.path.dirname(filepath)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(filepath, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
    except OSError as exc:
        logger.error("Error writing to %s: %s", filepath, exc)
        raise StorageError(f"Cannot write {filepath}: {exc}", {"path": filepath}) from exc
    return digest_bytes(text.encode('utf-8'))


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Render rows as RFC-4180 CSV (minimal quoting, CRLF line ends)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(value) for value in row])
    return buffer.getvalue()


def write_csv(filepath: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Write a CSV table and return the SHA-256 of its bytes."""
    payload = csv_text(header, rows).encode('utf-8')
    try:
        parent = os.path.dirname(filepath)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(filepath, 'wb') as f:
            f.write(payload)
    except OSError as exc:
        logger.error("Error writing to %s: %s", filepath, exc)
        raise StorageError(f"Cannot write {filepath}: {exc}", {"path": filepath}) from exc
    return digest_bytes(payload)


def read_csv(filepath: str) -> List[Dict[str, str]]:
    """Read a CSV table written by `write_csv` into a list of dict rows."""
    if not os.path.exists(filepath):
        raise StorageError(f"Missing table {filepath}", {"path": filepath})
    with open(filepath, 'r', encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


def format_cell(value: Any) -> Any:
    """Stable text for floats so reports are byte-identical across reruns."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    return value


def parse_bool(raw: str) -> bool:
    return str(raw).strip().lower() in ("true", "1", "yes")


def digest_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def digest_json(data: Any) -> str:
    """SHA-256 of the canonical JSON rendering of `data`."""
    return digest_bytes(dump_json(data).encode('utf-8'))


def format_interval(interval: Optional[Sequence[float]], digits: int = 3) -> str:
    """Format a (low, high) pair for terminal output."""
    if not interval:
        return "n/a"
    low, high = interval
    return f"[{low:.{digits}g}, {high:.{digits}g}]"


def nearest_rank_band(values: Sequence[float], level: float) -> Tuple[float, float]:
    """Nearest-rank (low, high) percentiles dropping (1 - level) / 2 of the values at each end."""
    data = np.asarray(values, dtype=float)
    if data.size == 0:
        raise ValueError("no values")
    tail = round((1.0 - level) / 2.0, 12)
    low, high = np.quantile(data, [tail, round(1.0 - tail, 12)], method="inverted_cdf")
    return float(low), float(high)


def min_samples_for(level: float) -> int:
    """Fewest values for which a nearest-rank band at `level` drops at least one value per tail."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    return math.ceil(round(2.0 / (1.0 - level), 9))


def progress(iterable: Iterable, total: Optional[int] = None, desc: Optional[str] = None) -> Iterable:
    """tqdm progress bar, silent when stderr is not a terminal."""
    return tqdm(iterable, total=total, desc=desc, leave=False, disable=not sys.stderr.isatty())
