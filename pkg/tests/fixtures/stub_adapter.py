"""Minimal stdio counterparty for engine-side bridge tests.

Deliberately independent of the certseg package: frames are parsed with
json + numpy only, so protocol bugs on either side surface as failures
instead of cancelling out. Behaviour is selected by argv[1]:

  echo       segment via 0.5 mean-threshold, denoise echoes the tensor
  truncate   reply with a valid header but half the payload, then exit
  badshape   reply with a tensor of the wrong shape
  error      reply with an {"error": ...} line and exit 1
  hang       read the request, never answer
  badshake   emit a non-JSON handshake line
"""
import json
import sys

import numpy as np

MODE = sys.argv[1] if len(sys.argv) > 1 else "echo"


def write(b):
    sys.stdout.buffer.write(b)
    sys.stdout.buffer.flush()


def read_tensor(stream):
    header = json.loads(stream.readline().decode("utf-8"))
    dtype = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}[header["dtype"]]
    count = 1
    for s in header["shape"]:
        count *= s
    payload = stream.read(count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(header["shape"])


def encode_tensor(arr):
    name = "f32" if arr.dtype == np.float32 else "u16"
    header = json.dumps({"dtype": name, "shape": list(arr.shape), "order": "row-major"})
    return header.encode() + b"\n" + arr.tobytes()


def main():
    if MODE == "badshake":
        write(b"hello there\n")
        return 0
    write((json.dumps({"protocol": 1, "ops": ["segment", "denoise"], "num_classes": 2}) + "\n").encode())
    stdin = sys.stdin.buffer
    while True:
        line = stdin.readline()
        if not line:
            return 0
        op = json.loads(line.decode("utf-8"))
        tensor = read_tensor(stdin)
        if MODE == "hang":
            import time

            time.sleep(3600)
        if MODE == "error":
            write(b'{"error": "synthetic failure"}\n')
            return 1
        if op["op"] == "segment":
            labels = (tensor.mean(axis=2) >= 0.5).astype("<u2")
            out = labels
        else:
            out = tensor.astype("<f4")
        if MODE == "badshape":
            out = out.ravel()[:1].reshape(1, 1)
        blob = encode_tensor(out)
        if MODE == "truncate":
            write(blob[: len(blob) - max(1, out.nbytes // 2)])
            return 0
        write(blob)


if __name__ == "__main__":
    sys.exit(main())
