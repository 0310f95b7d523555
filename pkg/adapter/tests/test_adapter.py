"""Protocol-level conformance tests.

These drive the adapter over raw subprocess pipes, building and parsing
frames with struct/json only — no import of the engine package — so the
adapter is checked against the wire specification itself.
"""
import json
import os
import struct
import subprocess
import sys
from pathlib import Path

SRC = Path(__file__).resolve().parents[1] / "src"
ENV = {**os.environ, "PYTHONPATH": str(SRC) + os.pathsep + os.environ.get("PYTHONPATH", "")}


def frame(op: dict, dtype: str, shape, payload: bytes) -> bytes:
    header = json.dumps({"dtype": dtype, "shape": list(shape), "order": "row-major"})
    return (json.dumps(op) + "\n").encode() + header.encode() + b"\n" + payload


def pack_f32(values) -> bytes:
    return struct.pack(f"<{len(values)}f", *values)


def run_adapter(args, stdin: bytes):
    proc = subprocess.run(
        [sys.executable, "-m", "certseg_adapter", *args],
        input=stdin, capture_output=True, timeout=60, env=ENV,
    )
    return proc.returncode, proc.stdout


def split_response(blob: bytes):
    """Consume (handshake line, [(header, payload), ...]) from adapter stdout."""
    line, _, rest = blob.partition(b"\n")
    handshake = json.loads(line)
    tensors = []
    while rest:
        hline, _, rest = rest.partition(b"\n")
        header = json.loads(hline)
        if "error" in header:
            tensors.append((header, b""))
            break
        itemsize = {"f32": 4, "u16": 2}[header["dtype"]]
        count = 1
        for s in header["shape"]:
            count *= s
        tensors.append((header, rest[: count * itemsize]))
        rest = rest[count * itemsize :]
    return handshake, tensors


class TestHandshake:
    def test_identity_declares_denoise(self):
        rc, out = run_adapter(["--model", "identity"], b"")
        assert rc == 0
        handshake, _ = split_response(out)
        assert handshake == {"protocol": 1, "ops": ["denoise"], "num_classes": 2}

    def test_threshold_declares_segment_and_classes(self):
        rc, out = run_adapter(["--model", "threshold:0.25,0.75"], b"")
        assert rc == 0
        handshake, _ = split_response(out)
        assert handshake == {"protocol": 1, "ops": ["segment"], "num_classes": 3}

    def test_eof_is_clean_exit(self):
        rc, _ = run_adapter(["--model", "blur"], b"")
        assert rc == 0


class TestIdentity:
    def test_payload_echoed_bit_exactly(self):
        payload = bytes(range(256)) * 4  # 256 f32 values with arbitrary bit patterns
        req = frame({"op": "denoise", "t": 5}, "f32", (8, 8, 4), payload)
        rc, out = run_adapter(["--model", "identity"], req)
        assert rc == 0
        _, tensors = split_response(out)
        header, echoed = tensors[0]
        assert header == {"dtype": "f32", "shape": [8, 8, 4], "order": "row-major"}
        assert echoed == payload

    def test_multiple_frames_in_one_session(self):
        p1 = pack_f32([0.0, 1.0, 2.0, 3.0])
        p2 = pack_f32([4.0, 5.0, 6.0, 7.0])
        req = frame({"op": "denoise", "t": 0}, "f32", (2, 2, 1), p1) + frame(
            {"op": "denoise", "t": 1}, "f32", (2, 2, 1), p2
        )
        rc, out = run_adapter(["--model", "identity"], req)
        assert rc == 0
        _, tensors = split_response(out)
        assert [t[1] for t in tensors] == [p1, p2]


class TestThreshold:
    def test_half_open_bins(self):
        vals = [0.1, 0.5, 0.9, -2.0]  # at-threshold pixel takes the upper class
        req = frame({"op": "segment"}, "f32", (2, 2, 1), pack_f32(vals))
        rc, out = run_adapter(["--model", "threshold:0.5"], req)
        assert rc == 0
        _, tensors = split_response(out)
        header, payload = tensors[0]
        assert header["dtype"] == "u16" and header["shape"] == [2, 2]
        assert struct.unpack("<4H", payload) == (0, 1, 1, 0)

    def test_channel_mean(self):
        vals = [0.0, 0.0, 0.9, 0.9, 0.9, 0.9]  # means 0.3 and 0.9
        req = frame({"op": "segment"}, "f32", (1, 2, 3), pack_f32(vals))
        rc, out = run_adapter(["--model", "threshold:0.5"], req)
        assert rc == 0
        _, tensors = split_response(out)
        assert struct.unpack("<2H", tensors[0][1]) == (0, 1)


class TestBlur:
    def test_constant_field_unchanged(self):
        vals = [0.25] * 16
        req = frame({"op": "denoise", "t": 2}, "f32", (4, 4, 1), pack_f32(vals))
        rc, out = run_adapter(["--model", "blur:1"], req)
        assert rc == 0
        _, tensors = split_response(out)
        got = struct.unpack("<16f", tensors[0][1])
        assert all(abs(v - 0.25) < 1e-6 for v in got)

    def test_spike_is_spread(self):
        vals = [0.0] * 25
        vals[12] = 1.0  # center of a 5x5 grid
        req = frame({"op": "denoise", "t": 0}, "f32", (5, 5, 1), pack_f32(vals))
        rc, out = run_adapter(["--model", "blur:1"], req)
        assert rc == 0
        _, tensors = split_response(out)
        got = struct.unpack("<25f", tensors[0][1])
        assert abs(got[12] - 1.0 / 9.0) < 1e-6
        assert abs(got[0]) < 1e-9  # outside the window


class TestErrorPaths:
    def test_malformed_op_line(self):
        rc, out = run_adapter(["--model", "identity"], b"this is not json\n")
        assert rc == 1
        _, tensors = split_response(out)
        assert "error" in tensors[0][0]

    def test_unsupported_op(self):
        req = frame({"op": "segment"}, "f32", (1, 1, 1), pack_f32([0.0]))
        rc, out = run_adapter(["--model", "identity"], req)
        assert rc == 1
        _, tensors = split_response(out)
        assert "error" in tensors[0][0]

    def test_bad_dtype_in_request(self):
        req = frame({"op": "denoise", "t": 0}, "u16", (1, 1), struct.pack("<H", 3))
        rc, out = run_adapter(["--model", "identity"], req)
        assert rc == 1

    def test_truncated_request_payload(self):
        blob = frame({"op": "denoise", "t": 0}, "f32", (2, 2, 1), pack_f32([0.0] * 4))
        rc, out = run_adapter(["--model", "identity"], blob[:-3])
        assert rc == 1
        _, tensors = split_response(out)
        assert "truncated" in tensors[0][0]["error"]

    def test_unknown_model_spec(self):
        rc, _ = run_adapter(["--model", "nonsense"], b"")
        assert rc == 2


class TestFaultInjection:
    def test_truncate_cuts_the_payload(self):
        req = frame({"op": "denoise", "t": 0}, "f32", (4, 4, 1), pack_f32([0.5] * 16))
        rc, out = run_adapter(["--model", "identity", "--fault", "truncate"], req)
        assert rc == 0
        # handshake + response header arrive, payload is short
        line, _, rest = out.partition(b"\n")
        hline, _, payload = rest.partition(b"\n")
        header = json.loads(hline)
        assert header["shape"] == [4, 4, 1]
        assert 0 < len(payload) < 64
