"""Binary named-tensor container.

Layout (all integers little-endian):

  - magic: 4 bytes ("STXG" for generator models, "STXW" for descriptor
    weights)
  - format version: u32
  - metadata: u32 byte length + UTF-8 JSON (sorted keys)
  - index: u32 tensor count, then per tensor:
      u16 name length + UTF-8 name, u8 ndim, ndim * u32 dims,
      u64 byte offset into the payload
  - payload: concatenated little-endian float32 tensors

Writing is fully deterministic: tensors are stored in the order given (save
callers sort names), so save -> load -> save round-trips to identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

FORMAT_VERSION = 1
MAGIC_GENERATOR = b"STXG"
MAGIC_DESCRIPTOR = b"STXW"


class ContainerError(ValueError):
    """Malformed or mismatching container file."""


def save_tensors(path, magic, metadata, tensors):
    """Write ``tensors`` (iterable of (name, float32 array)) to ``path``."""
    meta_blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
    index = io.BytesIO()
    payload = io.BytesIO()
    items = list(tensors)
    index.write(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        index.write(struct.pack("<H", len(nb)))
        index.write(nb)
        index.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            index.write(struct.pack("<I", d))
        index.write(struct.pack("<Q", payload.tell()))
        payload.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(index.getvalue())
        f.write(payload.getvalue())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise ContainerError(f"truncated container: while reading {what}")
    return data


def load_tensors(path, magic):
    """Read a container; returns (metadata dict, {name: float32 array},
    sha256 hex digest of the payload bytes)."""
    with open(path, "rb") as f:
        got = _read_exact(f, 4, "magic")
        if got != magic:
            raise ContainerError(
                f"bad magic: expected {magic!r}, got {got!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise ContainerError(f"unsupported format version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        metadata = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        entries = []
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, "dim"))[0]
                for _ in range(ndim))
            (offset,) = struct.unpack("<Q", _read_exact(f, 8, "offset"))
            entries.append((name, shape, offset))
        payload = f.read()
    tensors = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(payload):
            raise ContainerError(
                f"truncated container: tensor {name!r} extends past payload")
        tensors[name] = np.frombuffer(
            payload[offset:end], dtype="<f4").reshape(shape).copy()
    digest = hashlib.sha256(payload).hexdigest()
    return metadata, tensors, digest


def file_checksum(path):
    """sha256 of the whole file, for sidecar provenance."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
