"""Flat binary tensor format and multi-tensor checkpoints.

A single record is::

    8 bytes   magic "DESTNSR1"
    u32       rank                      (little-endian)
    u32 * r   extents                   (little-endian)
    f64 * n   row-major payload         (little-endian)

A checkpoint is simply the concatenation of such records, described by a
JSON manifest sitting next to it (``<path>.json``) that maps each tensor
name to its byte offset and shape, plus an optional embedded config blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DESTNSR1"


class TensorFormatError(ValueError):
    """Malformed binary tensor record."""


def tensor_to_bytes(arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    head = MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one record starting at ``offset``; returns (array, next_offset)."""
    if buf[offset : offset + 8] != MAGIC:
        raise TensorFormatError(f"bad magic at byte {offset}")
    pos = offset + 8
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = pos + 8 * count
    if end > len(buf):
        raise TensorFormatError(f"truncated payload at byte {pos}")
    data = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64)
    return data.reshape(shape), end


def write_tensor(path, arr):
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path):
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr


def manifest_path(ckpt_path):
    return Path(str(ckpt_path) + ".json")


def save_checkpoint(path, named_tensors, config=None):
    """Write named tensors as concatenated records plus a JSON manifest.

    ``named_tensors`` preserves insertion order, which keeps byte output
    reproducible run to run.  ``config`` (any JSON-serializable object) is
    embedded in the manifest so a checkpoint is self-describing.
    """
    path = Path(path)
    blobs, entries, offset = [], {}, 0
    for name, value in named_tensors.items():
        data = value.data if hasattr(value, "data") else value
        blob = tensor_to_bytes(data)
        entries[name] = {"offset": offset, "shape": list(np.asarray(data).shape)}
        blobs.append(blob)
        offset += len(blob)
    path.write_bytes(b"".join(blobs))
    manifest = {"format": MAGIC.decode(), "tensors": entries}
    if config is not None:
        manifest["config"] = config
    manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (dict name -> ndarray, config-or-None)."""
    path = Path(path)
    manifest = json.loads(manifest_path(path).read_text())
    buf = path.read_bytes()
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr, _ = tensor_from_bytes(buf, entry["offset"])
        if list(arr.shape) != entry["shape"]:
            raise TensorFormatError(f"shape mismatch for {name!r}")
        tensors[name] = arr
    return tensors, manifest.get("config")
