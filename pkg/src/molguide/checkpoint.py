"""Binary checkpoints: JSON header, little-endian float64 vectors, SHA-256 trailer.

Layout::

    b"MOLGCKPT" | u32 version | u64 header length | header JSON (utf-8)
    | float64[n] for each vector named in header["vectors"] | sha256(all preceding bytes)
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import ConfigMismatchError, CorruptCheckpointError

MAGIC = b"MOLGCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    kind: str  # "predictor" or "regressor"
    header: dict
    vectors: Dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a temp file is renamed over ``path`` only once complete."""
    names = sorted(ckpt.vectors)
    header = dict(ckpt.header, kind=ckpt.kind, vectors={n: int(ckpt.vectors[n].size) for n in names})
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes
    body += b"".join(np.ascontiguousarray(ckpt.vectors[n], dtype="<f8").tobytes() for n in names)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def load_checkpoint(path, kind: Optional[str] = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size + _DIGEST:
        raise CorruptCheckpointError(f"{path}: truncated checkpoint")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[_PREFIX.size : _PREFIX.size + hlen])
    offset = _PREFIX.size + hlen
    vectors = {}
    for name, n in sorted(header.pop("vectors").items()):
        vectors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
    if offset != len(body):
        raise CorruptCheckpointError(f"{path}: size does not match header")
    found = header.pop("kind")
    if kind is not None and found != kind:
        raise ConfigMismatchError(f"{path}: expected a {kind} checkpoint, found {found}")
    return Checkpoint(found, header, vectors)
