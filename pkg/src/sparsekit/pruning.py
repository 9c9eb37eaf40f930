"""Magnitude pruning, N:M block projection, mask freezing, gradual schedules.

A prune mask is a boolean array with the matrix's shape, True where the
weight survives. Pruning always produces exact zeros, which is what the
compressed format keys on. Working definitions:

- magnitude_prune zeroes the k = round(sparsity * size) smallest-magnitude
  entries of the whole layer (round half up, so targets resolve the same
  way on every platform). Ties are broken by row-major index, earlier
  entries pruned first, which also makes the kept set at a higher sparsity
  a subset of the kept set at any lower one.
- nm_project keeps the n largest-magnitude entries of every length-m block
  along each row (ties keep the lower index). On a matrix with no
  pre-existing zeros the result has sparsity exactly 1 - n/m.
"""

from dataclasses import dataclass

import numpy as np

from .formats import pack_mask, unpack_mask, mask_words_per_row
from .tensor import FormatError, check_matrix

import struct


def magnitude_prune(w, sparsity):
    """Zero the smallest-|w| entries to reach the target layer sparsity.

    Returns (pruned matrix, keep mask). The input is not modified.
    """
    w = check_matrix(w)
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    n = w.size
    k = int(np.floor(sparsity * n + 0.5))
    mask = np.ones(n, dtype=bool)
    if k > 0:
        order = np.argsort(np.abs(w).ravel(), kind="stable")
        mask[order[:k]] = False
    mask = mask.reshape(w.shape)
    out = np.where(mask, w, np.float32(0.0)).astype(np.float32)
    return out, mask


def nm_project(w, pattern):
    """Project onto the N:M pattern: per-block top-n by magnitude."""
    w = check_matrix(w)
    rows, cols = w.shape
    if cols % pattern.m != 0:
        raise ValueError(f"block length {pattern.m} does not divide cols={cols}")
    blocks = w.reshape(rows, cols // pattern.m, pattern.m)
    # Stable sort on -|w| puts larger magnitudes first and, among equal
    # magnitudes, lower indices first, which is the keep priority.
    order = np.argsort(-np.abs(blocks), axis=2, kind="stable")
    mask = np.zeros(blocks.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :, : pattern.n], True, axis=2)
    mask = mask.reshape(rows, cols)
    out = np.where(mask, w, np.float32(0.0)).astype(np.float32)
    return out, mask


def freeze_mask(grad, mask):
    """Zero gradient entries at dropped positions so pruned weights stay 0."""
    grad = np.asarray(grad)
    if grad.shape != mask.shape:
        raise ValueError(f"grad shape {grad.shape} != mask shape {mask.shape}")
    return np.where(mask, grad, grad.dtype.type(0))


@dataclass
class SparsitySchedule:
    levels: tuple
    finetune_epochs_per_level: int

    def __post_init__(self):
        levels = tuple(float(x) for x in self.levels)
        if any(not 0.0 < x <= 1.0 for x in levels):
            raise ValueError(f"levels must lie in (0, 1], got {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"levels must be strictly increasing, got {levels}")
        if self.finetune_epochs_per_level < 0:
            raise ValueError("finetune_epochs_per_level must be >= 0")
        self.levels = levels


def run_schedule(model, schedule, pruner, finetune):
    """Iterate prune-then-finetune over the schedule's levels, in order.

    pruner(model, level) prunes the model's prunable layers in place and
    returns the measured sparsity. finetune(model, level, epochs) fine
    tunes in place and returns a metrics dict. A single-level schedule is
    exactly a one-shot prune plus fine-tune; an empty schedule returns the
    model untouched with empty history.
    """
    history = []
    for level in schedule.levels:
        try:
            measured = pruner(model, level)
            metrics = finetune(model, level, schedule.finetune_epochs_per_level)
        except Exception as exc:
            raise RuntimeError(f"schedule failed at sparsity level {level}") from exc
        entry = {"level": level, "sparsity": float(measured)}
        entry.update(metrics or {})
        history.append(entry)
    return model, history


_SKBM_MAGIC = b"SKBM"


def save_skbm(path, mask):
    """Mask container: magic "SKBM", u32 rows, u32 cols, mask words little-endian."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-d")
    rows, cols = mask.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", _SKBM_MAGIC, rows, cols))
        f.write(pack_mask(mask).astype("<u4").tobytes())


def load_skbm(path):
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: truncated header")
        magic, rows, cols = struct.unpack("<4sII", head)
        if magic != _SKBM_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        payload = f.read()
    words = mask_words_per_row(cols)
    if len(payload) != rows * words * 4:
        raise FormatError(f"{path}: mask payload is {len(payload)} bytes, expected {rows * words * 4}")
    mask = np.frombuffer(payload, dtype="<u4").reshape(rows, words)
    return unpack_mask(np.ascontiguousarray(mask.astype(np.uint32)), cols)
