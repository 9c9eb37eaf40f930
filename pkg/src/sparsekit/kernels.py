"""Sparse matvec kernels over bitmask-compressed weights.

The hot loop walks each 32-bit mask word with a count-trailing-zeros
instruction: isolate the lowest set bit, accumulate value times input at
that column, clear the bit, repeat. Packed values are consumed strictly in
ascending column order, so for fp32 and fp16 payloads the accumulation
order matches a dense left-to-right matvec over the decompressed matrix
term for term and the result is bit-identical to that oracle. The int8
path hoists the per-row scale out of the loop (one multiply per row instead
of one per nonzero), which reorders the rounding against the dequantized
oracle; agreement there is close but not bitwise.

Rows are independent, so the tiled parallel path partitions rows across
threads and is bit-identical to the sequential path for every tile size and
thread count.
"""

import numpy as np
from llvmlite import ir
from numba import njit, prange, types
from numba.extending import intrinsic

from .formats import BitmaskCompressed
from .tensor import check_vector

# All 65536 half-precision bit patterns widened once; fp16 payloads are read
# as uint16 and looked up, because CPU float16 arithmetic is not a native
# numba operation.
_F16_LUT = np.arange(65536, dtype=np.uint16).view(np.float16).astype(np.float32)


@intrinsic
def _cttz64(typingctx, v):
    """Count trailing zeros of a nonzero uint64 (single machine instruction)."""
    if v != types.uint64:
        return None
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        (val,) = args
        return builder.cttz(val, ir.Constant(ir.IntType(1), 1))

    return sig, codegen


@njit(cache=False)
def _row_f32(mask, values, row_offsets, x, r):
    words = mask.shape[1]
    acc = np.float32(0.0)
    vidx = row_offsets[r]
    for wi in range(words):
        w = np.uint64(mask[r, wi])
        base = np.int64(wi) * 32
        while w != np.uint64(0):
            b = _cttz64(w)
            acc += values[vidx] * x[base + np.int64(b)]
            vidx += 1
            w &= w - np.uint64(1)
    return acc


@njit(cache=False)
def _row_f16(mask, raw16, lut, row_offsets, x, r):
    words = mask.shape[1]
    acc = np.float32(0.0)
    vidx = row_offsets[r]
    for wi in range(words):
        w = np.uint64(mask[r, wi])
        base = np.int64(wi) * 32
        while w != np.uint64(0):
            b = _cttz64(w)
            acc += lut[raw16[vidx]] * x[base + np.int64(b)]
            vidx += 1
            w &= w - np.uint64(1)
    return acc


@njit(cache=False)
def _row_i8(mask, codes, row_offsets, x, r):
    words = mask.shape[1]
    acc = np.float32(0.0)
    vidx = row_offsets[r]
    for wi in range(words):
        w = np.uint64(mask[r, wi])
        base = np.int64(wi) * 32
        while w != np.uint64(0):
            b = _cttz64(w)
            acc += np.float32(codes[vidx]) * x[base + np.int64(b)]
            vidx += 1
            w &= w - np.uint64(1)
    return acc


@njit(cache=False)
def _matvec_f32(mask, values, row_offsets, x, out):
    for r in range(mask.shape[0]):
        out[r] = _row_f32(mask, values, row_offsets, x, r)


@njit(cache=False)
def _matvec_f16(mask, raw16, lut, row_offsets, x, out):
    for r in range(mask.shape[0]):
        out[r] = _row_f16(mask, raw16, lut, row_offsets, x, r)


@njit(cache=False)
def _matvec_i8(mask, codes, scales, row_offsets, x, out):
    for r in range(mask.shape[0]):
        out[r] = scales[r] * _row_i8(mask, codes, row_offsets, x, r)


@njit(parallel=True, cache=False)
def _matvec_f32_tiled(mask, values, row_offsets, x, out, tile):
    rows = mask.shape[0]
    ntiles = (rows + tile - 1) // tile
    for t in prange(ntiles):
        hi = min((t + 1) * tile, rows)
        for r in range(t * tile, hi):
            out[r] = _row_f32(mask, values, row_offsets, x, r)


@njit(parallel=True, cache=False)
def _matvec_f16_tiled(mask, raw16, lut, row_offsets, x, out, tile):
    rows = mask.shape[0]
    ntiles = (rows + tile - 1) // tile
    for t in prange(ntiles):
        hi = min((t + 1) * tile, rows)
        for r in range(t * tile, hi):
            out[r] = _row_f16(mask, raw16, lut, row_offsets, x, r)


@njit(parallel=True, cache=False)
def _matvec_i8_tiled(mask, codes, scales, row_offsets, x, out, tile):
    rows = mask.shape[0]
    ntiles = (rows + tile - 1) // tile
    for t in prange(ntiles):
        hi = min((t + 1) * tile, rows)
        for r in range(t * tile, hi):
            out[r] = scales[r] * _row_i8(mask, codes, row_offsets, x, r)


def _check_input(c, x):
    if not isinstance(c, BitmaskCompressed):
        raise TypeError(f"expected BitmaskCompressed, got {type(c).__name__}")
    x = check_vector(x)
    if len(x) != c.cols:
        raise ValueError(f"input length {len(x)} does not match {c.cols} columns")
    return x


def sparse_matvec(c, x):
    """y = W @ x computed directly on the compressed container."""
    x = _check_input(c, x)
    out = np.empty(c.rows, dtype=np.float32)
    if c.value_width == "fp32":
        _matvec_f32(c.mask, c.values, c.row_offsets, x, out)
    elif c.value_width == "fp16":
        _matvec_f16(c.mask, c.values.view(np.uint16), _F16_LUT,
                    c.row_offsets, x, out)
    else:
        _matvec_i8(c.mask, c.values, c.scales, c.row_offsets, x, out)
    return out


def sparse_matvec_tiled(c, x, tile_rows=64, threads=None):
    """Row-parallel variant; bit-identical to sparse_matvec for any tiling.

    threads, when given, caps the numba thread pool for this call and
    restores the previous setting afterwards.
    """
    if tile_rows < 1:
        raise ValueError(f"tile_rows must be >= 1, got {tile_rows}")
    x = _check_input(c, x)
    out = np.empty(c.rows, dtype=np.float32)
    restore = None
    if threads is not None:
        from numba import get_num_threads, set_num_threads

        restore = get_num_threads()
        set_num_threads(threads)
    try:
        if c.value_width == "fp32":
            _matvec_f32_tiled(c.mask, c.values, c.row_offsets, x, out,
                              tile_rows)
        elif c.value_width == "fp16":
            _matvec_f16_tiled(c.mask, c.values.view(np.uint16), _F16_LUT,
                              c.row_offsets, x, out, tile_rows)
        else:
            _matvec_i8_tiled(c.mask, c.values, c.scales, c.row_offsets, x,
                             out, tile_rows)
    finally:
        if restore is not None:
            from numba import set_num_threads

            set_num_threads(restore)
    return out


def max_threads():
    """Upper bound on usable kernel threads in this process."""
    from numba import config

    return int(config.NUMBA_NUM_THREADS)


def warmup(like=None):
    """Compile every kernel once so timing loops never include JIT cost."""
    from .formats import compress

    gen = np.random.default_rng(0)
    w = gen.standard_normal((4, 40)).astype(np.float32)
    w[gen.random(w.shape) < 0.5] = 0.0
    x = gen.standard_normal(40).astype(np.float32)
    for width in ("fp32", "fp16", "int8"):
        c = compress(w, width)
        sparse_matvec(c, x)
        sparse_matvec_tiled(c, x, tile_rows=2)
    return True
