"""Versioned binary checkpoint container.

Layout: magic, format version, then a length-prefixed JSON header carrying
the config fingerprint, free-form metadata and the tensor manifest (names,
shapes, order), followed by each tensor's raw little-endian float64 bytes.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"R3CK"
VERSION = 1


class CheckpointError(RuntimeError):
    """File is not a readable checkpoint of a supported version."""


def save_container(path, tensors: dict, meta: dict, fingerprint: str) -> None:
    header = {
        "fingerprint": fingerprint,
        "meta": meta,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for t in tensors.values():
            arr = np.ascontiguousarray(t, dtype="<f8")
            f.write(arr.tobytes())


def load_container(path):
    """Returns (tensors, meta, fingerprint); raises CheckpointError on damage."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        manifest = header["tensors"]
        fingerprint = header["fingerprint"]
        meta = header["meta"]
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None

    tensors = {}
    offset = 16 + hlen
    for entry in manifest:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors, meta, fingerprint
