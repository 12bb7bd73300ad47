"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LLEB"            4 bytes magic
    version            uint32
    header_len         uint64
    header             header_len bytes of UTF-8 JSON
    payload            float64 little-endian tensors, in header order

The header holds ``method``, ``architecture`` (layer descriptors),
``tensors`` (a list of ``{"name", "shape"}``), ``config`` and any extra
metadata.  Tensors are stored row-major, so a save/load round trip is
bitwise exact.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LLEB"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    method: str
    architecture: dict
    tensors: dict
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.tensors)
    arrays = [np.ascontiguousarray(ckpt.tensors[n], dtype="<f8") for n in names]
    header = {
        "method": ckpt.method,
        "architecture": ckpt.architecture,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "config": ckpt.config,
        "meta": ckpt.meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(head)), head]
    parts.extend(a.tobytes() for a in arrays)
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}; expected {MAGIC!r}")
    if len(buf) < _PREFIX.size:
        raise TruncatedError("file ends inside the fixed header")
    _, version, hlen = _PREFIX.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}; this build reads version {VERSION}")
    end = _PREFIX.size + hlen
    if len(buf) < end:
        raise TruncatedError("file ends inside the JSON header")
    try:
        header = json.loads(buf[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    tensors = {}
    pos = end
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(buf) < pos + nbytes:
            raise TruncatedError(f"payload truncated in tensor {entry['name']!r} "
                                 f"({len(buf) - pos} of {nbytes} bytes)")
        tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return Checkpoint(header["method"], header["architecture"], tensors,
                      header.get("config", {}), header.get("meta", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
