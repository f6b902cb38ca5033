"""Deterministic array substrate: dtype policy, checked kernels, seeded RNG, tensor I/O.

Everything here is a thin, contract-enforcing layer over numpy. Compute runs
in float32 by default; geometry property checks use float64. All operations
are pure functions of their inputs and deterministic within a process.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

COMPUTE_DTYPE = np.float32
PROPERTY_DTYPE = np.float64

_DTYPE_NAMES = {"float32": np.float32, "float64": np.float64}


def as_compute(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=COMPUTE_DTYPE)


def as_property(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=PROPERTY_DTYPE)


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class MaskedRowError(ValueError):
    """Raised when a softmax row has no allowed entries (malformed topology)."""

    def __init__(self, row_index, message=None):
        self.row_index = row_index
        super().__init__(message or f"query row {row_index} has no allowed keys")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the trailing two axes, batched over leading axes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    try:
        return np.matmul(a, b)
    except ValueError as exc:
        raise ShapeError(f"matmul batch axes incompatible: {a.shape} x {b.shape}") from exc


def softmax_masked(logits: np.ndarray, allowed: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax over the allowed entries only; disallowed entries get exactly 0.

    Uses max-subtraction over the allowed entries for stability. A row with no
    allowed entry raises MaskedRowError naming the offending query row.
    """
    logits = np.asarray(logits)
    allowed = np.asarray(allowed, dtype=bool)
    if logits.shape != allowed.shape:
        raise ShapeError(f"logits {logits.shape} vs mask {allowed.shape}")
    if axis != -1 and axis != logits.ndim - 1:
        logits = np.moveaxis(logits, axis, -1)
        allowed = np.moveaxis(allowed, axis, -1)
        out = softmax_masked(logits, allowed, axis=-1)
        return np.moveaxis(out, -1, axis)

    row_ok = allowed.any(axis=-1)
    if not row_ok.all():
        bad = np.argwhere(~row_ok)[0]
        raise MaskedRowError(tuple(int(i) for i in bad))

    neg = np.array(-np.inf, dtype=logits.dtype)
    shifted = np.where(allowed, logits, neg)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)  # exp(-inf) is exactly 0
    expd = np.where(allowed, expd, 0.0)
    return expd / expd.sum(axis=-1, keepdims=True)


class RngStream:
    """Counter-based seeded random stream with splittable labelled substreams.

    Built on numpy's Philox generator, which draws identically on every
    platform for a given key. ``split(label)`` derives an independent child
    stream from (seed, path + label); splitting never perturbs the parent.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_path)
        spawn_key = tuple(_label_key(lbl) for lbl in self.path)
        self._ss = np.random.SeedSequence(self.seed, spawn_key=spawn_key)
        self._gen = np.random.Generator(np.random.Philox(self._ss))

    def split(self, *labels: str) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(labels))

    def normal(self, shape=(), dtype=COMPUTE_DTYPE) -> np.ndarray:
        # draw in float64 then cast: identical streams for both dtypes
        return self._gen.standard_normal(size=shape).astype(dtype)

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self._gen.random(size=shape).astype(dtype)

    def integers(self, low, high=None, shape=()):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _label_key(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def save_tensor(path, arr: np.ndarray) -> None:
    """Write a tensor as one UTF-8 JSON header line + raw little-endian payload."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype.name not in _DTYPE_NAMES:
        raise ValueError(f"unsupported dump dtype {arr.dtype}")
    header = {"shape": list(arr.shape), "dtype": arr.dtype.name, "byteorder": "little"}
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("byteorder") != "little":
            raise ValueError(f"unsupported byte order {header.get('byteorder')!r}")
        dtype = _DTYPE_NAMES[header["dtype"]]
        shape = tuple(int(s) for s in header["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(), dtype=np.dtype(dtype).newbyteorder("<"), count=count)
    return data.astype(dtype).reshape(shape)
