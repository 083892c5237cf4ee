"""Versioned named-tensor container.

Byte layout (all integers little-endian)::

    offset 0   magic      b"CINVCKPT"
    offset 8   version    uint32 (currently 1)
    offset 12  header_len uint64
    offset 20  header     UTF-8 JSON, header_len bytes
    then       payload    concatenated raw tensor bytes (C order)

The header holds ``{"tensors": {name: {"dtype", "shape", "offset", "nbytes"}},
"meta": {...}}``; offsets are relative to the start of the payload. ``meta``
carries schedule constants, the config hash, the vocabulary, and any
JSON-serializable extras (step counters, inversion logs, layout metrics).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MAGIC = b"CINVCKPT"
VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def save(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    header = {"tensors": {}, "meta": meta or {}}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise DataError(f"unsupported dtype {dtype} for tensor {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        header["tensors"][name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    out = {}
    for name, info in header["tensors"].items():
        start = base + info["offset"]
        buf = data[start:start + info["nbytes"]]
        if len(buf) != info["nbytes"]:
            raise DataError(f"truncated tensor {name} in {path}")
        arr = np.frombuffer(buf, dtype=np.dtype(info["dtype"]).newbyteorder("<")).reshape(info["shape"])
        out[name] = torch.from_numpy(arr.astype(info["dtype"]))
    return out, header["meta"]
