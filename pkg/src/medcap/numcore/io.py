"""Raw tensor files: one JSON header line, then a little-endian row-major payload."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class TensorFormatError(ValueError):
    """A raw tensor file is malformed."""


def encode_tensor(array: np.ndarray, dtype: str = "f32") -> bytes:
    if dtype not in _DTYPES:
        raise TensorFormatError(f"unsupported dtype {dtype!r}")
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    header = json.dumps({"dtype": dtype, "shape": list(arr.shape)}, separators=(",", ":"))
    return header.encode("ascii") + b"\n" + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    newline = blob.find(b"\n")
    if newline < 0:
        raise TensorFormatError("missing header line")
    try:
        header = json.loads(blob[:newline].decode("ascii"))
        dtype = _DTYPES[header["dtype"]]
        shape = tuple(int(n) for n in header["shape"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise TensorFormatError(f"bad header: {exc}") from None
    payload = blob[newline + 1:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise TensorFormatError(f"payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(path, array: np.ndarray, dtype: str | None = None) -> None:
    if dtype is None:
        dtype = _NAMES.get(np.asarray(array).dtype, "f32")
    Path(path).write_bytes(encode_tensor(array, dtype))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
