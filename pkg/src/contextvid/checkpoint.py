"""Flat binary parameter checkpoints.

Layout: magic string, little-endian uint64 header length, JSON header mapping
tensor name -> {shape, dtype}, then raw little-endian payloads in header
order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CTXVIDCKPT1\n"


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    header = {
        "tensors": {
            name: {"shape": list(tensors[name].shape), "dtype": np.dtype(tensors[name].dtype).str}
            for name in sorted(tensors)
        },
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in header["tensors"]:
            arr = np.asarray(tensors[name])
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len))
        tensors = {}
        for name, info in header["tensors"].items():
            dtype = np.dtype(info["dtype"])
            shape = tuple(info["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated payload for {name}")
            tensors[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return tensors, header.get("metadata", {})
