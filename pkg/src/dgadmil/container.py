"""Binary container shared by volume, bag and attention files.

Layout: a fixed-length ASCII header line of ``HEADER_SIZE`` bytes (space padded,
terminated by ``\\n``) followed by row-major little-endian float32 values.

The header is a sequence of whitespace separated tokens. The first token is the
magic string, every following token is ``key=value``. ``shape`` and ``dtype`` are
mandatory.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

HEADER_SIZE = 512
DTYPE_TAG = "f32le"


class FormatError(ValueError):
    """Raised when a container file is malformed."""


def _encode_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_encode_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if any(c.isspace() for c in text) or "=" in text:
        raise ValueError(f"header value {text!r} may not contain whitespace or '='")
    return text


def write_container(path: str | os.PathLike, magic: str, array: np.ndarray, meta: dict | None = None) -> None:
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        raise ValueError("refusing to write non-finite values")
    tokens = [magic, f"shape={_encode_value(tuple(int(s) for s in array.shape))}", f"dtype={DTYPE_TAG}"]
    for key, value in (meta or {}).items():
        if key in ("shape", "dtype"):
            raise ValueError(f"reserved header key {key!r}")
        tokens.append(f"{key}={_encode_value(value)}")
    header = " ".join(tokens)
    if len(header) + 1 > HEADER_SIZE:
        raise ValueError(f"header too long ({len(header)} bytes)")
    header = header.ljust(HEADER_SIZE - 1) + "\n"
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def read_container(path: str | os.PathLike, magic: str) -> tuple[np.ndarray, dict[str, str]]:
    """Read a container, returning the array and the raw header fields."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"header: file shorter than the {HEADER_SIZE}-byte header")
    try:
        header = raw[:HEADER_SIZE].decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("header: not ASCII") from exc
    if not header.endswith("\n"):
        raise FormatError("header: missing terminating newline")
    tokens = header.split()
    if not tokens or tokens[0] != magic:
        found = tokens[0] if tokens else ""
        raise FormatError(f"magic: expected {magic!r}, found {found!r}")
    fields: dict[str, str] = {}
    for tok in tokens[1:]:
        key, sep, value = tok.partition("=")
        if not sep:
            raise FormatError(f"header: malformed token {tok!r}")
        fields[key] = value
    if fields.get("dtype") != DTYPE_TAG:
        raise FormatError(f"dtype: expected {DTYPE_TAG!r}, found {fields.get('dtype')!r}")
    if "shape" not in fields:
        raise FormatError("shape: missing")
    try:
        shape = tuple(int(s) for s in fields["shape"].split(","))
    except ValueError as exc:
        raise FormatError(f"shape: cannot parse {fields['shape']!r}") from exc
    if any(s < 0 for s in shape):
        raise FormatError(f"shape: negative extent in {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    payload = raw[HEADER_SIZE:]
    if len(payload) < 4 * count:
        raise FormatError(f"payload: truncated, expected {count} float32 values, found {len(payload) // 4}")
    if len(payload) > 4 * count:
        raise FormatError(f"payload: {len(payload) - 4 * count} trailing bytes")
    array = np.frombuffer(payload, dtype="<f4", count=count).reshape(shape).astype(np.float32)
    return array, fields


def parse_ints(fields: dict[str, str], key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in fields[key].split(","))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{key}: missing or malformed") from exc


def parse_float(fields: dict[str, str], key: str) -> float:
    try:
        return float(fields[key])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{key}: missing or malformed") from exc
