"""Dense substrate: matrices, vectors, seeded RNG, matvec, softmax, file io.

Conventions used across the package:

- A matrix is a C-contiguous 2-d float32 ndarray, row-major. A vector is a
  1-d float32 ndarray. FP32 is the only native compute type; float64 shows
  up only inside scalar loss reductions, and float16 only as a storage
  width.
- Randomness comes from numpy's PCG64 via np.random.default_rng(seed).
  PCG64 is a small-state modern generator whose stream for a fixed seed is
  stable across platforms and pinned by numpy's stream-compatibility
  policy, which is the reproducibility contract the package relies on:
  same seed, same bytes, everywhere.
- dense_matvec accumulates each output row strictly left to right in FP32.
  Fixing the reduction order makes results bit-reproducible and lets a
  row-parallel execution be bit-identical to the sequential one.
"""

import struct

import numpy as np
from numba import njit


class FormatError(ValueError):
    """A binary container failed validation (bad magic, size, or payload)."""


def rng(seed):
    """Seeded generator for everything random in the package."""
    return np.random.default_rng(seed)


def check_matrix(w):
    w = np.ascontiguousarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got ndim={w.ndim}")
    return w


def check_vector(x):
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got ndim={x.ndim}")
    return x


def random_matrix(rows, cols, gen, dist="gaussian", scale=1.0):
    """Draw a rows x cols float32 matrix from gaussian(0, scale) or uniform(-scale, scale)."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dims must be positive, got {rows}x{cols}")
    if dist == "gaussian":
        w = gen.standard_normal((rows, cols), dtype=np.float32)
        if scale != 1.0:
            w *= np.float32(scale)
    elif dist == "uniform":
        w = gen.random((rows, cols), dtype=np.float32)
        w = (2.0 * scale) * w - scale
        w = w.astype(np.float32)
    else:
        raise ValueError(f"unknown dist {dist!r}")
    return w


@njit(cache=True)
def _dense_matvec_kernel(w, x, out):
    rows, cols = w.shape
    for r in range(rows):
        acc = np.float32(0.0)
        for c in range(cols):
            acc += w[r, c] * x[c]
        out[r] = acc


def dense_matvec(w, x):
    """y[i] = sum_j w[i,j] x[j], per-row left-to-right FP32 accumulation."""
    w = check_matrix(w)
    x = check_vector(x)
    if x.shape[0] != w.shape[1]:
        raise ValueError(f"shape mismatch: {w.shape} @ ({x.shape[0]},)")
    out = np.empty(w.shape[0], dtype=np.float32)
    _dense_matvec_kernel(w, x, out)
    return out


def softmax(logits):
    """Shift-stabilized softmax. Internal math in float64, result in the input dtype."""
    z = np.asarray(logits)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    z64 = z.astype(np.float64)
    z64 -= z64.max(axis=-1, keepdims=True)
    e = np.exp(z64)
    p = e / e.sum(axis=-1, keepdims=True)
    return p.astype(z.dtype) if z.dtype.kind == "f" else p


_SKDM_MAGIC = b"SKDM"


def save_skdm(path, w):
    """Write a matrix: magic "SKDM", u32 rows, u32 cols, little-endian fp32 payload."""
    w = check_matrix(w)
    rows, cols = w.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", _SKDM_MAGIC, rows, cols))
        f.write(w.astype("<f4").tobytes())


def load_skdm(path):
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: truncated header")
        magic, rows, cols = struct.unpack("<4sII", head)
        if magic != _SKDM_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        payload = f.read()
    expect = rows * cols * 4
    if len(payload) != expect:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    w = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    w = np.ascontiguousarray(w, dtype=np.float32)
    if not np.all(np.isfinite(w)):
        raise FormatError(f"{path}: non-finite values in payload")
    return w
