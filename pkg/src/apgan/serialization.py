"""Byte-deterministic container for nested state with embedded arrays.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the raw array bytes back to back in header order. Dict key order and
types (int keys, tuples) survive a round trip, so load-then-save
reproduces the file exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"APGANCK1"

_TORCH_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.int8: "int8",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_NAME_TO_TORCH = {v: k for k, v in _TORCH_DTYPES.items()}


def _encode(obj, arrays: list):
    if isinstance(obj, torch.Tensor):
        t = obj.detach().cpu().contiguous()
        arrays.append(t.numpy())
        return {"__tensor__": len(arrays) - 1, "dtype": _TORCH_DTYPES[t.dtype], "shape": list(t.shape)}
    if isinstance(obj, np.ndarray):
        arrays.append(np.ascontiguousarray(obj))
        return {"__ndarray__": len(arrays) - 1, "dtype": obj.dtype.str, "shape": list(obj.shape)}
    if isinstance(obj, dict):
        return {"__dict__": [[_encode(k, arrays), _encode(v, arrays)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(v, arrays) for v in obj]}
    if isinstance(obj, list):
        return [_encode(v, arrays) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _decode(obj, arrays):
    if isinstance(obj, list):
        return [_decode(v, arrays) for v in obj]
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            arr = arrays[obj["__tensor__"]]
            return torch.from_numpy(arr.copy()).reshape(obj["shape"])
        if "__ndarray__" in obj:
            return arrays[obj["__ndarray__"]].copy()
        if "__tuple__" in obj:
            return tuple(_decode(v, arrays) for v in obj["__tuple__"])
        if "__dict__" in obj:
            return {_decode(k, arrays): _decode(v, arrays) for k, v in obj["__dict__"]}
        raise FormatError("malformed container header")
    return obj


def dumps(state) -> bytes:
    arrays: list = []
    tree = _encode(state, arrays)
    entries = []
    offset = 0
    for a in arrays:
        entries.append({"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    header = json.dumps({"tree": tree, "arrays": entries}, separators=(",", ":")).encode()
    body = b"".join(a.tobytes() for a in arrays)
    return MAGIC + struct.pack("<Q", len(header)) + header + body


def loads(data: bytes):
    if data[:8] != MAGIC:
        raise FormatError("not an apgan container (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt container header: {e}") from e
    base = 16 + n
    arrays = []
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise FormatError("truncated container")
        arrays.append(np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]))
    return _decode(header["tree"], arrays)


def save(path, state):
    data = dumps(state)
    Path(path).write_bytes(data)
    return data


def load(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return loads(p.read_bytes())
