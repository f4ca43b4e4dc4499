"""Binary formats for single tensors (``TNSR``) and named-tensor checkpoints.

TNSR layout (all little-endian)::

    b"TNSR" | version u16 | rank u16 | extents u64 * rank | precision u8 | raw data

Checkpoint layout::

    b"CKPT" | header length u64 | header JSON | concatenated raw tensors

The checkpoint header maps each tensor name to ``{"shape", "dtype", "offset",
"nbytes"}`` (offsets relative to the start of the payload); an optional
``"__metadata__"`` entry carries free-form JSON.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Any, Optional, Union

import numpy as np

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
CKPT_MAGIC = b"CKPT"

_PREC_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_NAME = {np.dtype(np.float32): "f32le", np.dtype(np.float64): "f64le"}
_NAME_DTYPE = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed or truncated container."""


def _as_array(t) -> np.ndarray:
    data = getattr(t, "data", t)
    arr = np.asarray(data)
    if arr.dtype not in _PREC_TAG:
        raise FormatError(f"unsupported dtype {arr.dtype}; only f32/f64 are serializable")
    return arr


def tensor_to_bytes(t) -> bytes:
    arr = _as_array(t)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    head = TNSR_MAGIC + struct.pack("<HH", TNSR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    head += struct.pack("<B", _PREC_TAG[arr.dtype])
    return head + np.ascontiguousarray(le).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != TNSR_MAGIC:
        raise FormatError("not a TNSR blob (bad magic)")
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    off = 8
    if len(buf) < off + 8 * rank + 1:
        raise FormatError("truncated TNSR header")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    (tag,) = struct.unpack_from("<B", buf, off)
    off += 1
    if tag not in _TAG_DTYPE:
        raise FormatError(f"unknown precision tag {tag}")
    dtype = _TAG_DTYPE[tag]
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - off != count * dtype.itemsize:
        raise FormatError(f"TNSR payload has {len(buf) - off} bytes, expected {count * dtype.itemsize}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def save_tensor(path: PathLike, t) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def save_checkpoint(path: PathLike, tensors: dict[str, Any], metadata: Optional[dict] = None) -> None:
    header: dict[str, Any] = {}
    blobs = []
    offset = 0
    for name in tensors:
        arr = _as_array(tensors[name])
        raw = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False)).tobytes()
        header[name] = {"shape": list(arr.shape), "dtype": _DTYPE_NAME[arr.dtype],
                        "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    if metadata is not None:
        header["__metadata__"] = metadata
    hjson = json.dumps(header, sort_keys=False).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hjson)))
        fh.write(hjson)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path: PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", buf, 4)
    start = 12 + hlen
    if len(buf) < start:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(buf[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    meta = header.pop("__metadata__", {})
    out = {}
    for name, info in header.items():
        dtype = _NAME_DTYPE[info["dtype"]]
        lo = start + info["offset"]
        hi = lo + info["nbytes"]
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        if hi > len(buf) or count * dtype.itemsize != info["nbytes"]:
            raise FormatError(f"{path}: payload for {name!r} is truncated or inconsistent")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=lo).reshape(info["shape"])
        out[name] = arr.astype(dtype.newbyteorder("="))
    return out, meta
