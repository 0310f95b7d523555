"""Base segmenters and denoisers: deterministic built-ins plus the external
process bridge through which real (e.g. neural) models attach.

Built-ins accept intensities outside [0, 1] without clamping; the noise model
is unbounded Gaussian and clamping inputs would bias the smoothed classifier.
"""
from __future__ import annotations

import json
import os
import queue
import select
import subprocess
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import nseg
from .core import Image
from .errors import (
    BridgeBadShape,
    BridgeProcessExit,
    BridgeTimeout,
    DomainError,
    NonAscendingThresholds,
    NsegFormatError,
    ProtocolViolation,
)

PROTOCOL_VERSION = 1


# ---------------------------------------------------------------------------
# built-in segmenters


def _threshold_bins(x: np.ndarray, thr: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        x = x[:, :, None]
    if x.shape[2] == 1:
        mean = x[:, :, 0].astype(np.float64)
    else:
        mean = x.mean(axis=2, dtype=np.float64)
    return np.searchsorted(thr, mean.ravel(), side="right").reshape(mean.shape)


def threshold_segment(x: np.ndarray, thresholds) -> np.ndarray:
    """Bin per-pixel mean intensity into classes 0..len(thresholds).

    Bins are half-open: a pixel exactly at a threshold gets the upper class.
    """
    thr = np.asarray(thresholds, dtype=np.float64)
    if thr.ndim != 1 or thr.size < 1:
        raise DomainError("need at least one threshold")
    if thr.size > 1 and not (np.diff(thr) > 0.0).all():
        raise NonAscendingThresholds(f"thresholds must be strictly ascending, got {thresholds}")
    return _threshold_bins(np.asarray(x), thr).astype(np.int64)


def prototype_segment(x: np.ndarray, prototypes) -> np.ndarray:
    """Nearest prototype per pixel (Euclidean over channels), ties to the
    smallest class id."""
    protos = np.asarray(prototypes, dtype=np.float32)
    if protos.ndim == 1:
        protos = protos[:, None]
    if protos.ndim != 2 or protos.shape[0] < 2:
        raise DomainError(f"need >= 2 prototype vectors, got shape {protos.shape}")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.shape[2] != protos.shape[1]:
        raise DomainError(
            f"prototype channel count {protos.shape[1]} != image channels {x.shape[2]}"
        )
    # (k, H, W) squared distances; argmin picks the smallest id on ties
    diff = x[None, :, :, :] - protos[:, None, None, :]
    d2 = np.einsum("khwc,khwc->khw", diff, diff)
    return d2.argmin(axis=0).astype(np.int64)


class ThresholdSegmenter:
    """k-class segmenter from k-1 ascending mean-intensity thresholds."""

    concurrency_capable = True

    def __init__(self, thresholds):
        thr = np.asarray(thresholds, dtype=np.float64)
        if thr.ndim != 1 or thr.size < 1:
            raise DomainError("need at least one threshold")
        if thr.size > 1 and not (np.diff(thr) > 0.0).all():
            raise NonAscendingThresholds(f"thresholds must be strictly ascending, got {thresholds}")
        self.thresholds = thr
        self.num_classes = int(thr.size) + 1

    def segment(self, x: np.ndarray) -> np.ndarray:
        # thresholds were validated at construction; skip re-checking per call
        return _threshold_bins(np.asarray(x), self.thresholds)


class PrototypeSegmenter:
    """Nearest-intensity-prototype segmenter; one prototype vector per class."""

    concurrency_capable = True

    def __init__(self, prototypes):
        protos = np.asarray(prototypes, dtype=np.float32)
        if protos.ndim == 1:
            protos = protos[:, None]
        if protos.ndim != 2 or protos.shape[0] < 2:
            raise DomainError(f"need >= 2 prototypes, got shape {protos.shape}")
        self.prototypes = protos
        self.num_classes = int(protos.shape[0])

    def segment(self, x: np.ndarray) -> np.ndarray:
        return prototype_segment(x, self.prototypes)


class ConstantSegmenter:
    """Outputs one fixed class everywhere; useful as a degenerate fixture."""

    concurrency_capable = True

    def __init__(self, label: int, num_classes: int):
        if not 0 <= label < num_classes:
            raise DomainError(f"label {label} outside [0, {num_classes})")
        self.label = int(label)
        self.num_classes = int(num_classes)

    def segment(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return np.full(x.shape[:2], self.label, dtype=np.int64)


# ---------------------------------------------------------------------------
# built-in denoisers


class IdentityDenoiser:
    """Returns its input unchanged (a denoiser that does nothing)."""

    concurrency_capable = True

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        return np.asarray(x, dtype=np.float32)


class OracleDenoiser:
    """Returns the stored clean image regardless of input or noise level.

    Upper-bounds what any denoiser could achieve; lets end-to-end tests
    separate statistical behaviour from denoising quality.
    """

    concurrency_capable = True

    def __init__(self, clean: Image):
        # prediction lives in the [-1, 1] denoiser domain
        self._pred = (np.float32(2.0) * clean.data - np.float32(1.0))

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        return self._pred


# ---------------------------------------------------------------------------
# external-process bridge

_READ_CHUNK = 1 << 16


@dataclass(frozen=True)
class BridgeFrame:
    """One request: an op line plus its NSEG tensor payload."""

    op: str
    tensor: np.ndarray
    t: int | None = None


class BridgeProcess:
    """Child process speaking the stdio bridge protocol.

    Launch -> child immediately writes one handshake JSON line
    ``{"protocol": 1, "ops": [...], "num_classes": k}`` on stdout. Each
    request is one op JSON line plus one NSEG tensor on the child's stdin;
    each response is one NSEG tensor (or one ``{"error": ...}`` line) on its
    stdout. One request in flight at a time; calls are serialized.
    """

    def __init__(self, cmd: list[str], timeout: float = 60.0):
        self.cmd = list(cmd)
        self.timeout = float(timeout)
        self._lock = threading.Lock()
        self._buf = bytearray()
        self._proc = subprocess.Popen(
            self.cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=None,
            bufsize=0,
        )
        try:
            line = self._read_line(time.monotonic() + self.timeout, mid_frame=False)
            handshake = json.loads(line.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            self.close()
            raise ProtocolViolation(f"bad handshake line: {exc}") from exc
        except Exception:
            self.close()
            raise
        if not isinstance(handshake, dict) or handshake.get("protocol") != PROTOCOL_VERSION:
            self.close()
            raise ProtocolViolation(f"unsupported handshake: {handshake!r}")
        self.ops = tuple(handshake.get("ops", ()))
        self.num_classes = handshake.get("num_classes")

    # -- raw pipe I/O with deadline ------------------------------------

    def _fill(self, deadline: float, mid_frame: bool) -> None:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise BridgeTimeout(f"no response from {self.cmd[0]} within {self.timeout}s")
        fd = self._proc.stdout.fileno()
        ready, _, _ = select.select([fd], [], [], remaining)
        if not ready:
            raise BridgeTimeout(f"no response from {self.cmd[0]} within {self.timeout}s")
        chunk = os.read(fd, _READ_CHUNK)
        if not chunk:
            # EOF before any byte of a response means the adapter went away;
            # EOF inside a frame is a truncated response
            if mid_frame or self._buf:
                raise ProtocolViolation("bridge stream closed mid-frame")
            try:
                code = self._proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                raise ProtocolViolation(
                    f"{self.cmd[0]} closed its stdout while still running"
                ) from None
            raise BridgeProcessExit(f"{self.cmd[0]} exited with code {code}")
        self._buf.extend(chunk)

    def _read_line(self, deadline: float, mid_frame: bool = True) -> bytes:
        while True:
            idx = self._buf.find(b"\n")
            if idx >= 0:
                line = bytes(self._buf[: idx + 1])
                del self._buf[: idx + 1]
                return line
            self._fill(deadline, mid_frame)

    def _read_exact(self, n: int, deadline: float) -> bytes:
        while len(self._buf) < n:
            self._fill(deadline, mid_frame=True)
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    # -- framed request/response ----------------------------------------

    def request(self, frame: BridgeFrame) -> np.ndarray:
        header: dict = {"op": frame.op}
        if frame.t is not None:
            header["t"] = int(frame.t)
        payload = (json.dumps(header) + "\n").encode("utf-8") + nseg.encode(frame.tensor)
        with self._lock:
            if self._proc.poll() is not None:
                raise BridgeProcessExit(
                    f"{self.cmd[0]} exited with code {self._proc.returncode}"
                )
            try:
                self._proc.stdin.write(payload)
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise BridgeProcessExit(f"{self.cmd[0]} closed its stdin: {exc}") from exc
            deadline = time.monotonic() + self.timeout
            line = self._read_line(deadline, mid_frame=False)
            stripped = line.strip()
            if stripped.startswith(b"{") and b'"error"' in stripped:
                try:
                    err = json.loads(stripped.decode("utf-8"))
                except (json.JSONDecodeError, UnicodeDecodeError):
                    err = None
                if isinstance(err, dict) and "error" in err:
                    raise ProtocolViolation(f"adapter reported: {err['error']}")
            try:
                dtype, shape = nseg.decode_header(line)
            except NsegFormatError as exc:
                raise ProtocolViolation(f"bad response header: {exc}") from exc
            raw = self._read_exact(nseg.payload_nbytes(dtype, shape), deadline)
            return nseg.from_payload(dtype, shape, raw)

    def close(self) -> None:
        proc = self._proc
        if proc.stdin and not proc.stdin.closed:
            try:
                proc.stdin.close()
            except OSError:
                pass
        try:
            proc.wait(timeout=5.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def bridge_call(handle, frame: BridgeFrame) -> np.ndarray:
    """One validated request/response round trip with a process or pool."""
    if frame.op not in handle.ops:
        raise ProtocolViolation(f"adapter does not support op {frame.op!r} (ops={handle.ops})")
    out = handle.request(frame)
    if frame.op == "segment":
        want = frame.tensor.shape[:2]
        if out.dtype != np.uint16 or out.shape != want:
            raise BridgeBadShape(
                f"segment response {out.dtype}{out.shape}, expected u16 {want}"
            )
    elif frame.op == "denoise":
        if out.dtype != np.float32 or out.shape != frame.tensor.shape:
            raise BridgeBadShape(
                f"denoise response {out.dtype}{out.shape}, expected f32 {frame.tensor.shape}"
            )
    return out


class BridgePool:
    """Fixed-size pool of adapter processes for parallel certification.

    A single adapter allows one in-flight request; the pool leases an idle
    process per call and lazily spawns up to ``size`` of them. Responses are
    independent of which process served a request (adapters are
    deterministic and stateless between frames), so pooling cannot change
    outputs.
    """

    def __init__(self, cmd: list[str], size: int = 1, timeout: float = 60.0):
        if size < 1:
            raise DomainError(f"pool size must be >= 1, got {size}")
        self.cmd = list(cmd)
        self.timeout = float(timeout)
        self._size = size
        self._spawned: list[BridgeProcess] = []
        self._idle: "queue.Queue[BridgeProcess]" = queue.Queue()
        self._lock = threading.Lock()
        first = BridgeProcess(self.cmd, timeout=self.timeout)
        self._spawned.append(first)
        self._idle.put(first)
        self.ops = first.ops
        self.num_classes = first.num_classes

    def _acquire(self) -> BridgeProcess:
        try:
            return self._idle.get_nowait()
        except queue.Empty:
            pass
        with self._lock:
            if len(self._spawned) < self._size:
                proc = BridgeProcess(self.cmd, timeout=self.timeout)
                self._spawned.append(proc)
                return proc
        return self._idle.get()

    def request(self, frame: BridgeFrame) -> np.ndarray:
        proc = self._acquire()
        try:
            return proc.request(frame)
        finally:
            self._idle.put(proc)

    @property
    def process_count(self) -> int:
        return len(self._spawned)

    def close(self) -> None:
        with self._lock:
            for proc in self._spawned:
                proc.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class BridgeSegmenter:
    """Segmenter handle backed by an external adapter process (or pool)."""

    def __init__(self, endpoint):
        if "segment" not in endpoint.ops:
            raise ProtocolViolation(f"adapter ops {endpoint.ops} lack 'segment'")
        if not isinstance(endpoint.num_classes, int) or endpoint.num_classes < 2:
            raise ProtocolViolation(
                f"segment adapter must declare num_classes >= 2, got {endpoint.num_classes!r}"
            )
        self.endpoint = endpoint
        self.num_classes = endpoint.num_classes
        self.concurrency_capable = isinstance(endpoint, BridgePool)

    def segment(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 2:
            x = x[:, :, None]
        return bridge_call(self.endpoint, BridgeFrame(op="segment", tensor=x))

    def close(self):
        self.endpoint.close()


class BridgeDenoiser:
    """Denoiser handle backed by an external adapter process (or pool)."""

    def __init__(self, endpoint):
        if "denoise" not in endpoint.ops:
            raise ProtocolViolation(f"adapter ops {endpoint.ops} lack 'denoise'")
        self.endpoint = endpoint
        self.concurrency_capable = isinstance(endpoint, BridgePool)

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        return bridge_call(
            self.endpoint, BridgeFrame(op="denoise", tensor=np.asarray(x, dtype=np.float32), t=t)
        )

    def close(self):
        self.endpoint.close()


# ---------------------------------------------------------------------------
# handle factories for CLI specs


def make_segmenter(spec: str, dataset_info: dict | None = None, timeout: float = 60.0,
                   pool_size: int = 1):
    """Build a segmenter handle from a compact spec string.

    threshold:T1[,T2,...]          mean-intensity bins
    prototype:V0,V1,...            one scalar intensity per class (1 channel)
    prototype:V00,V01;V10,V11;...  per-class channel vectors
    prototype:auto                 class intensities from the dataset manifest
    constant:LABEL[:K]             fixed class (K from manifest when omitted)
    external:CMD ARG ...           spawn an adapter speaking the bridge protocol
    """
    kind, _, rest = spec.partition(":")
    if kind == "threshold":
        return ThresholdSegmenter([float(v) for v in rest.split(",") if v != ""])
    if kind == "prototype":
        if rest == "auto":
            if not dataset_info or "class_intensities" not in dataset_info:
                raise DomainError("prototype:auto needs class_intensities in the dataset manifest")
            return PrototypeSegmenter(dataset_info["class_intensities"])
        protos = [[float(v) for v in group.split(",")] for group in rest.split(";")]
        return PrototypeSegmenter(protos)
    if kind == "constant":
        parts = rest.split(":")
        label = int(parts[0])
        if len(parts) > 1:
            k = int(parts[1])
        elif dataset_info and "num_classes" in dataset_info:
            k = int(dataset_info["num_classes"])
        else:
            raise DomainError("constant:LABEL needs :K or a dataset manifest with num_classes")
        return ConstantSegmenter(label, k)
    if kind == "external":
        return BridgeSegmenter(_endpoint(rest.split(), timeout, pool_size))
    raise DomainError(f"unknown segmenter spec {spec!r}")


def _endpoint(cmd: list[str], timeout: float, pool_size: int):
    if pool_size > 1:
        return BridgePool(cmd, size=pool_size, timeout=timeout)
    return BridgeProcess(cmd, timeout=timeout)


def make_denoiser(spec: str, timeout: float = 60.0, pool_size: int = 1):
    """Build a denoiser handle: ``identity`` or ``external:CMD ARG ...``.

    The ``oracle`` denoiser is constructed per image by the runner since it
    needs the clean input.
    """
    kind, _, rest = spec.partition(":")
    if kind == "identity":
        return IdentityDenoiser()
    if kind == "external":
        return BridgeDenoiser(_endpoint(rest.split(), timeout, pool_size))
    raise DomainError(f"unknown denoiser spec {spec!r}")
