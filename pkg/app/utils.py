"""Utility functions for hashing, number formatting and timestamps."""

import hashlib
import logging
import math
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Union

import pytz

Number = Union[int, float, Fraction]


def validate_timezone(tz_str: str) -> bool:
    """Check if timezone string is valid IANA timezone."""
    try:
        pytz.timezone(tz_str)
        return True
    except pytz.exceptions.UnknownTimeZoneError:
        return False


def now_iso(timezone: str) -> str:
    """Current time as ISO string in the given IANA timezone."""
    return datetime.now(pytz.timezone(timezone)).isoformat(timespec="seconds")


class TimezoneFormatter(logging.Formatter):
    """Log formatter rendering asctime in a configured timezone."""

    def __init__(self, fmt: Optional[str] = None, datefmt: Optional[str] = None, timezone: str = "UTC"):
        super().__init__(fmt, datefmt)
        self._tz = pytz.timezone(timezone)

    def formatTime(self, record: logging.LogRecord, datefmt: Optional[str] = None) -> str:
        dt = datetime.fromtimestamp(record.created, pytz.utc).astimezone(self._tz)
        if datefmt:
            return dt.strftime(datefmt)
        return f"{dt.strftime('%Y-%m-%d %H:%M:%S')},{int(record.msecs):03d}"


def as_fraction(value: Number) -> Fraction:
    """
    Exact rational for a ratio given as float, int or Fraction.

    Floats go through their shortest repr, so 0.8 becomes 4/5 and not the
    binary approximation.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if not math.isfinite(value):
        raise ValueError(f"non-finite ratio {value!r}")
    return Fraction(repr(float(value)))


def round_half_up(value: Fraction) -> int:
    """Round a rational to the nearest integer, halves away from zero for positives."""
    return math.floor(value + Fraction(1, 2))


def stable_hash(*parts: object) -> int:
    """64-bit hash of the parts' string forms, stable across processes."""
    key = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def sha256_bytes(data: bytes) -> str:
    """Hex SHA-256 of a byte string."""
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    """Hex SHA-256 of a file's content."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def format_float(value: Optional[float]) -> str:
    """Serialize a float with 9 significant digits; absent values become ''."""
    if value is None:
        return ""
    return format(float(value), ".9g")


def parse_optional_float(text: str) -> Optional[float]:
    """Inverse of format_float."""
    text = text.strip()
    if not text:
        return None
    return float(text)


def make_run_id(mode: str, fraction: float, seed: int) -> str:
    """Stable identifier of one sweep cell, e.g. 'source_pretrained-f0.3-s1'."""
    return f"{mode}-f{format_float(fraction)}-s{seed}"


def format_tables_message(rows: Iterable[dict]) -> Optional[str]:
    """
    Render aggregate table rows as a short console summary.

    Returns None if there are no rows.
    """
    lines = []
    current = None
    for row in rows:
        if row["table"] != current:
            current = row["table"]
            lines.append(f"{current}:")
        value = row["value"]
        shown = "undefined" if value is None else f"{value:+.2f}%"
        excluded = f" ({row['excluded']} excluded)" if row["excluded"] else ""
        lines.append(f"  - {row['init_mode']:<20} {row['metric']:<12} {shown}{excluded}")
    if not lines:
        return None
    return "\n".join(lines)
