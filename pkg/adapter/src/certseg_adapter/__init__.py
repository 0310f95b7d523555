"""Reference stdio adapter for the certseg external-model bridge.

Implements the wire protocol with the standard library only, so it runs
anywhere a Python interpreter does:

  handshake   one JSON line on stdout:
              {"protocol": 1, "ops": [...], "num_classes": k}
  request     one JSON op line ({"op": "segment"} or {"op": "denoise",
              "t": int}) followed by one NSEG tensor on stdin
  response    one NSEG tensor on stdout, or {"error": "..."} + exit 1
              for a malformed frame

NSEG: one JSON header line {"dtype": "f32"|"u16", "shape": [ints],
"order": "row-major"} then the raw little-endian payload, no padding.

Ships three conformance models: ``identity`` (echoes the payload
bit-exactly), ``blur`` (box-blur denoiser), and ``threshold`` (mean-
intensity segmenter). Real neural models wrap the same way; see the README
for a commented example.
"""
from __future__ import annotations

import json
import struct
from bisect import bisect_right

PROTOCOL_VERSION = 1

_ITEM = {"f32": ("f", 4), "u16": ("H", 2)}


class ProtocolError(Exception):
    """Malformed incoming frame; reported to the engine, then exit 1."""


# ---------------------------------------------------------------------------
# NSEG framing


def encode_tensor(dtype: str, shape: tuple[int, ...], values) -> bytes:
    code, _ = _ITEM[dtype]
    header = json.dumps({"dtype": dtype, "shape": list(shape), "order": "row-major"})
    return header.encode("utf-8") + b"\n" + struct.pack(f"<{len(values)}{code}", *values)


def read_tensor(stream) -> tuple[str, tuple[int, ...], bytes]:
    """Read one tensor; returns (dtype, shape, raw payload bytes)."""
    line = stream.readline()
    if not line:
        raise ProtocolError("stream ended where an NSEG header was expected")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad NSEG header: {exc}") from exc
    if not isinstance(header, dict) or header.get("order") != "row-major":
        raise ProtocolError(f"unsupported NSEG header: {header!r}")
    dtype = header.get("dtype")
    if dtype not in _ITEM:
        raise ProtocolError(f"unsupported dtype {dtype!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not shape or not all(
        isinstance(s, int) and s > 0 for s in shape
    ):
        raise ProtocolError(f"bad shape {shape!r}")
    count = 1
    for s in shape:
        count *= s
    nbytes = count * _ITEM[dtype][1]
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise ProtocolError(f"truncated payload: {len(payload)} of {nbytes} bytes")
    return dtype, tuple(shape), payload


def unpack_values(dtype: str, payload: bytes) -> tuple:
    code, size = _ITEM[dtype]
    return struct.unpack(f"<{len(payload) // size}{code}", payload)


# ---------------------------------------------------------------------------
# conformance models


class IdentityModel:
    """Echoes every tensor bit-exactly (payload bytes pass through untouched)."""

    ops = ("denoise",)
    raw_echo = True

    def apply(self, op, shape, values, t):
        return "f32", shape, values


class BlurModel:
    """Box-blur denoiser over the spatial dims, window clipped at borders."""

    ops = ("denoise",)
    raw_echo = False

    def __init__(self, radius: int = 1):
        if radius < 1:
            raise ValueError(f"blur radius must be >= 1, got {radius}")
        self.radius = radius

    def apply(self, op, shape, values, t):
        if len(shape) != 3:
            raise ProtocolError(f"denoise expects (H, W, C), got shape {shape}")
        h, w, c = shape
        r = self.radius
        out = [0.0] * (h * w * c)
        for y in range(h):
            y0, y1 = max(0, y - r), min(h - 1, y + r)
            for x in range(w):
                x0, x1 = max(0, x - r), min(w - 1, x + r)
                area = (y1 - y0 + 1) * (x1 - x0 + 1)
                for ch in range(c):
                    acc = 0.0
                    for yy in range(y0, y1 + 1):
                        row = (yy * w) * c + ch
                        for xx in range(x0, x1 + 1):
                            acc += values[row + xx * c]
                    out[(y * w + x) * c + ch] = acc / area
        return "f32", shape, out


class ThresholdModel:
    """Mean-intensity bins; a pixel exactly at a threshold takes the upper class."""

    ops = ("segment",)
    raw_echo = False

    def __init__(self, thresholds):
        thresholds = [float(t) for t in thresholds]
        if not thresholds or any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError(f"thresholds must be nonempty strictly ascending, got {thresholds}")
        self.thresholds = thresholds
        self.num_classes = len(thresholds) + 1

    def apply(self, op, shape, values, t):
        if len(shape) != 3:
            raise ProtocolError(f"segment expects (H, W, C), got shape {shape}")
        h, w, c = shape
        labels = []
        for pix in range(h * w):
            if c == 1:
                mean = values[pix]
            else:
                acc = 0.0
                for ch in range(c):
                    acc += values[pix * c + ch]
                mean = acc / c
            labels.append(bisect_right(self.thresholds, mean))
        return "u16", (h, w), labels


def build_model(spec: str):
    kind, _, rest = spec.partition(":")
    if kind == "identity":
        return IdentityModel()
    if kind == "blur":
        return BlurModel(int(rest) if rest else 1)
    if kind == "threshold":
        return ThresholdModel(rest.split(","))
    raise ValueError(f"unknown model spec {spec!r}")


# ---------------------------------------------------------------------------
# serve loop


def serve(model, num_classes: int, stdin, stdout, fault: str | None = None) -> int:
    """Answer frames until EOF (exit 0); malformed frame -> error line, exit 1."""
    handshake = {
        "protocol": PROTOCOL_VERSION,
        "ops": list(model.ops),
        "num_classes": num_classes,
    }
    stdout.write((json.dumps(handshake) + "\n").encode("utf-8"))
    stdout.flush()

    while True:
        line = stdin.readline()
        if not line:
            return 0
        try:
            try:
                request = json.loads(line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ProtocolError(f"bad op line: {exc}") from exc
            if not isinstance(request, dict) or "op" not in request:
                raise ProtocolError(f"op line must be a JSON object with 'op': {request!r}")
            op = request["op"]
            if op not in model.ops:
                raise ProtocolError(f"unsupported op {op!r} (ops: {list(model.ops)})")
            dtype, shape, payload = read_tensor(stdin)
            if dtype != "f32":
                raise ProtocolError(f"requests carry f32 tensors, got {dtype}")

            if getattr(model, "raw_echo", False):
                header = json.dumps(
                    {"dtype": dtype, "shape": list(shape), "order": "row-major"}
                ).encode("utf-8")
                blob = header + b"\n" + payload
            else:
                values = unpack_values(dtype, payload)
                out_dtype, out_shape, out_values = model.apply(
                    op, shape, values, request.get("t")
                )
                blob = encode_tensor(out_dtype, out_shape, out_values)

            if fault == "truncate":
                # deliberate fault injection for conformance testing: send the
                # header plus a short payload, then die
                cut = len(blob) - max(1, (len(blob) - blob.index(b"\n")) // 2)
                stdout.write(blob[:cut])
                stdout.flush()
                return 0
            stdout.write(blob)
            stdout.flush()
        except ProtocolError as exc:
            stdout.write((json.dumps({"error": str(exc)}) + "\n").encode("utf-8"))
            stdout.flush()
            return 1
