"""Checkpoint files: magic line, plain-text header, flat little-endian tensor body.

Layout::

    LISTEREO-CKPT v1
    meta <key> <value...>
    tensor <name> <dtype> <d0,d1,...> <offset> <nbytes>
    end
    <body bytes>

Offsets are relative to the first body byte.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = "LISTEREO-CKPT v1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict, meta: dict | None = None) -> None:
    """Write ``{name: ndarray}`` plus string metadata atomically."""
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if not key or any(c.isspace() for c in key) or "\n" in str(value):
            raise CheckpointError(f"bad metadata entry {key!r}")
        lines.append(f"meta {key} {value}")
    blobs, offset = [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"bad tensor name {name!r}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"tensor {name} {arr.dtype.name} {shape} {offset} {len(data)}")
        blobs.append(data)
        offset += len(data)
    lines.append("end")
    payload = ("\n".join(lines) + "\n").encode() + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def load(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode() + b"\n") or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or missing header end)")
    header = raw[:end].decode().split("\n")
    body = raw[end + len(b"\nend\n"):]
    tensors, meta = {}, {}
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            try:
                name, dtype, shape, off, nbytes = rest.split(" ")
                dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
                off, nbytes = int(off), int(nbytes)
            except ValueError:
                raise CheckpointError(f"{path}: malformed tensor entry {line!r}") from None
            if dtype not in _DTYPES or off + nbytes > len(body):
                raise CheckpointError(f"{path}: tensor {name} out of range or bad dtype")
            arr = np.frombuffer(body, _DTYPES[dtype], nbytes // np.dtype(_DTYPES[dtype]).itemsize, off)
            if arr.size != int(np.prod(dims)):
                raise CheckpointError(f"{path}: tensor {name} size does not match shape {dims}")
            tensors[name] = arr.reshape(dims).astype(dtype)
        else:
            raise CheckpointError(f"{path}: unknown header line {line!r}")
    return tensors, meta
