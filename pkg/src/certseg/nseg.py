"""NSEG tensor container.

One UTF-8 JSON header line terminated by ``\\n`` with fields
``{"dtype": "f32"|"u16", "shape": [ints], "order": "row-major"}`` followed
immediately by the raw little-endian payload of exactly product-of-shape
elements. No padding, no trailing bytes. Used wherever tensors cross a
process or file boundary.
"""
from __future__ import annotations

import json

import numpy as np

from .errors import NsegFormatError

_WIRE_TO_DTYPE = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


def _wire_name(dtype: np.dtype) -> str:
    if dtype == np.float32:
        return "f32"
    if dtype == np.uint16:
        return "u16"
    raise NsegFormatError(f"unsupported dtype {dtype}; NSEG carries f32 or u16 only")


def header_bytes(arr: np.ndarray) -> bytes:
    header = {"dtype": _wire_name(arr.dtype), "shape": list(arr.shape), "order": "row-major"}
    return (json.dumps(header, separators=(", ", ": ")) + "\n").encode("utf-8")


def decode_header(line: bytes) -> tuple[np.dtype, tuple[int, ...]]:
    """Parse one header line into (numpy dtype, shape)."""
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise NsegFormatError(f"invalid NSEG header: {exc}") from exc
    if not isinstance(obj, dict):
        raise NsegFormatError(f"NSEG header must be a JSON object, got {type(obj).__name__}")
    missing = {"dtype", "shape", "order"} - obj.keys()
    if missing:
        raise NsegFormatError(f"NSEG header missing fields: {sorted(missing)}")
    if obj["order"] != "row-major":
        raise NsegFormatError(f"unsupported order {obj['order']!r}")
    if obj["dtype"] not in _WIRE_TO_DTYPE:
        raise NsegFormatError(f"unsupported dtype {obj['dtype']!r}")
    shape = obj["shape"]
    if (
        not isinstance(shape, list)
        or not shape
        or not all(isinstance(s, int) and s > 0 for s in shape)
    ):
        raise NsegFormatError(f"shape must be a nonempty list of positive ints, got {shape!r}")
    return _WIRE_TO_DTYPE[obj["dtype"]], tuple(shape)


def payload_nbytes(dtype: np.dtype, shape: tuple[int, ...]) -> int:
    n = 1
    for s in shape:
        n *= s
    return n * dtype.itemsize


def from_payload(dtype: np.dtype, shape: tuple[int, ...], payload: bytes) -> np.ndarray:
    expected = payload_nbytes(dtype, shape)
    if len(payload) != expected:
        raise NsegFormatError(f"payload has {len(payload)} bytes, header declares {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def encode(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    return header_bytes(arr) + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def write_stream(stream, arr: np.ndarray) -> None:
    stream.write(encode(arr))


def read_stream(stream) -> np.ndarray:
    """Read exactly one tensor from a binary stream, leaving the rest untouched."""
    line = stream.readline()
    if not line:
        raise NsegFormatError("empty stream where an NSEG header was expected")
    dtype, shape = decode_header(line)
    nbytes = payload_nbytes(dtype, shape)
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise NsegFormatError(f"truncated payload: got {len(payload)} of {nbytes} bytes")
    return from_payload(dtype, shape, payload)


def write(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode(arr))


def read(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_stream(f)
        if f.read(1):
            raise NsegFormatError(f"{path}: trailing bytes after payload")
    return arr
