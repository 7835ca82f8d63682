"""Checkpoint tensor dumps.

File layout (version 1)::

    REPAIR-TENSORS 1\\n
    <header length in bytes, ASCII decimal>\\n
    <JSON header>
    <raw tensor bytes, concatenated in header order>

The JSON header holds ``meta`` (free-form scalars) and ``tensors``, a list of
``{"name", "shape", "dtype", "offset", "nbytes"}`` entries. ``dtype`` is a
numpy type string that includes the byte order, always ``"<f8"`` for matrices
written by this package (little-endian float64) and ``"<i8"`` for integer
arrays such as masks stored as 0/1. Offsets are relative to the first byte
after the header. Keys are written sorted, so identical content gives
identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

MAGIC = b"REPAIR-TENSORS 1\n"


def save_tensors(path: Union[str, Path], tensors: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(header)}\n".encode())
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a tensor dump (bad magic)")
    pos = len(MAGIC)
    nl = data.index(b"\n", pos)
    hlen = int(data[pos:nl])
    header = json.loads(data[nl + 1:nl + 1 + hlen])
    body = data[nl + 1 + hlen:]
    out = {}
    for ent in header["tensors"]:
        raw = body[ent["offset"]:ent["offset"] + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {ent['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"])
        out[ent["name"]] = arr.astype(np.float64 if arr.dtype.kind == "f" else np.int64)
    return out, header["meta"]
