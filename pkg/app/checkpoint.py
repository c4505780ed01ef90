"""Checkpoint type and its bit-exact binary file format."""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from app.errors import CorruptCheckpointError
from app.utils import sha256_bytes

logger = logging.getLogger(__name__)

FORMAT_MAGIC = b"XFRCKPT1"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


@dataclass(eq=False)
class Checkpoint:
    """
    Named float32 parameters plus the architecture fingerprint and provenance.

    Provenance keys: init_mode, source_task (or None), trained_task, seed, epochs.
    """

    fingerprint: str
    parameters: Dict[str, np.ndarray]
    provenance: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self)

    def content_hash(self) -> str:
        return sha256_bytes(self.to_bytes())

    def same_as(self, other: "Checkpoint") -> bool:
        """Bit equality of everything that is serialized."""
        return self.to_bytes() == other.to_bytes()


class _Reader:
    """Cursor over a byte buffer that treats running out of bytes as corruption."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise CorruptCheckpointError(
                f"truncated data: need {n} bytes at offset {self.offset}, have {len(self.data) - self.offset}"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpointError(f"invalid UTF-8 at offset {self.offset - len(raw)}") from e


def _text_bytes(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def encode_tensor(name: str, array: np.ndarray) -> bytes:
    """One tensor record: name, rank, dims, then float32 little-endian values."""
    values = np.ascontiguousarray(array, dtype="<f4")
    parts = [_text_bytes(name), _U32.pack(values.ndim)]
    parts.extend(_U32.pack(d) for d in values.shape)
    parts.append(values.tobytes())
    return b"".join(parts)


def decode_tensor(data: bytes, offset: int = 0) -> Tuple[str, np.ndarray, int]:
    """Inverse of encode_tensor; returns (name, array, offset past the record)."""
    reader = _Reader(data, offset)
    name = reader.text()
    rank = reader.u32()
    shape = tuple(reader.u32() for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64))
    values = np.frombuffer(reader.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    return name, values, reader.offset


def _provenance_json(provenance: Dict[str, Any]) -> str:
    return json.dumps(provenance, sort_keys=True, separators=(",", ":"))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [
        FORMAT_MAGIC,
        _U32.pack(ckpt.version),
        _text_bytes(ckpt.fingerprint),
        _text_bytes(_provenance_json(ckpt.provenance)),
        _U32.pack(len(ckpt.parameters)),
    ]
    parts.extend(encode_tensor(name, value) for name, value in ckpt.parameters.items())
    return b"".join(parts)


def parse_checkpoint(data: bytes) -> Checkpoint:
    """Decode a checkpoint; any deviation from the format raises CorruptCheckpointError."""
    reader = _Reader(data)
    magic = reader.take(len(FORMAT_MAGIC))
    if magic != FORMAT_MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")

    fingerprint = reader.text()
    try:
        provenance = json.loads(reader.text())
    except json.JSONDecodeError as e:
        raise CorruptCheckpointError(f"invalid provenance JSON: {e}") from e
    if not isinstance(provenance, dict):
        raise CorruptCheckpointError("provenance must be a JSON object")

    parameters: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name, values, reader.offset = decode_tensor(data, reader.offset)
        if name in parameters:
            raise CorruptCheckpointError(f"duplicate tensor name {name!r}")
        parameters[name] = values

    if reader.offset != len(data):
        raise CorruptCheckpointError(f"{len(data) - reader.offset} trailing bytes after last tensor")
    return Checkpoint(fingerprint=fingerprint, parameters=parameters, provenance=provenance, version=version)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> str:
    """Write atomically; returns the SHA-256 of the written bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    digest = sha256_bytes(data)
    logger.debug(f"Saved checkpoint {path} ({len(data)} bytes, sha256 {digest[:12]})")
    return digest


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
