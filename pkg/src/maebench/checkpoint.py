"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"MAEBCKPT"            8-byte magic
    uint64                 header length in bytes
    header                 UTF-8 JSON: kind, config, config_hash, meta, tensor table
    payload                concatenated little-endian float arrays, in table order
    sha256                 32-byte digest of everything above

The trailing digest catches any single corrupted byte; the config hash
catches a header whose config was edited without updating the hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, CheckpointKindError, DataError, IntegrityError

MAGIC = b"MAEBCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict
    meta: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)

    def require_kind(self, kind: str) -> "Checkpoint":
        if self.kind != kind:
            raise CheckpointKindError(f"expected a {kind!r} checkpoint, got {self.kind!r}")
        return self


def _to_le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind != "f":
        raise CheckpointFormatError(f"only float arrays can be stored, got {arr.dtype}")
    dt = "<f8" if arr.dtype.itemsize == 8 else "<f4"
    return np.ascontiguousarray(arr, dtype=dt)


def dumps(ckpt: Checkpoint) -> bytes:
    table = []
    chunks = []
    offset = 0
    for group, arrays in (("params", ckpt.params), ("optimizer", ckpt.optimizer)):
        for name, arr in arrays.items():
            le = _to_le(arr)
            raw = le.tobytes()
            table.append({"group": group, "name": name, "shape": list(le.shape),
                          "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "format": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "config_hash": config_hash(ckpt.config),
        "meta": ckpt.meta,
        "tensors": table,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes) -> Checkpoint:
    start = len(MAGIC) + 8
    if len(blob) < start + _DIGEST or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic or truncated)")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    if start + hlen + _DIGEST > len(blob):
        raise CheckpointFormatError("truncated checkpoint: header extends past end of file")
    try:
        header = json.loads(blob[start : start + hlen].decode())
        payload_bytes = int(header["payload_bytes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None
    expected = start + hlen + payload_bytes + _DIGEST
    if len(blob) != expected:
        raise CheckpointFormatError(f"checkpoint has {len(blob)} bytes, header implies {expected}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint digest mismatch (file corrupted)")
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint format {header.get('format')!r}")
    if config_hash(header["config"]) != header["config_hash"]:
        raise IntegrityError("config hash mismatch")
    payload = body[start + hlen :]
    groups: dict = {"params": {}, "optimizer": {}}
    for entry in header["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[lo : lo + n], dtype=np.dtype(entry["dtype"]))
        groups[entry["group"]][entry["name"]] = arr.reshape(entry["shape"]).astype(
            arr.dtype.newbyteorder("="), copy=True
        )
    return Checkpoint(kind=header["kind"], config=header["config"], params=groups["params"],
                      meta=header["meta"], optimizer=groups["optimizer"])


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    return loads(blob)
