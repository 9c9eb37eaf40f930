"""Symmetric per-row INT8 post-training quantization.

Weights-only simulated quantization: a matrix is mapped to int8 codes plus
one fp32 scale per row, and inference quality is measured by evaluating the
model on dequantized (quantize-then-widen) copies of its linear weights.
Exact zeros map to code 0, so a pruned matrix keeps its sparsity pattern
through the round trip. The intended composition order is prune first,
quantize second; there is no support for pruning a quantized matrix.
"""

from dataclasses import dataclass

import numpy as np

from .formats import FormatError, _round_half_away, compress, sparsity_of
from .tensor import check_matrix


@dataclass
class QuantizedMatrix:
    """Dense int8 codes with one symmetric fp32 scale per row.

    scale_r = max|W[r, :]| / 127 (zero for an all-zero row), and every code
    satisfies q = clamp(round(w / scale_r), -127, 127) with round half away
    from zero. The clamp never bites for finite input because the row max
    itself lands on +-127.
    """

    rows: int
    cols: int
    values: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.rows, self.cols):
            raise FormatError(
                f"values shape {self.values.shape} does not match "
                f"({self.rows}, {self.cols})"
            )
        if self.values.dtype != np.int8:
            raise FormatError(f"values must be int8, got {self.values.dtype}")
        if self.scales.shape != (self.rows,):
            raise FormatError(
                f"scales shape {self.scales.shape} does not match ({self.rows},)"
            )
        if self.scales.dtype != np.float32:
            raise FormatError(f"scales must be float32, got {self.scales.dtype}")
        if np.any(self.scales < 0) or not np.all(np.isfinite(self.scales)):
            raise FormatError("scales must be finite and nonnegative")


def quantize_int8(w):
    """Quantize a dense matrix row by row to symmetric int8.

    The scale is stored in fp32 and the codes are computed against that
    stored (already rounded) scale, so the elementwise reconstruction bound
    |dequantize(q) - w| <= scale/2 holds exactly with respect to the scale
    that ships with the matrix.
    """
    w = check_matrix(w)
    rows, cols = w.shape
    w64 = w.astype(np.float64)
    rowmax = np.abs(w64).max(axis=1) if cols > 0 else np.zeros(rows)
    scales = (rowmax / 127.0).astype(np.float32)
    safe = np.where(scales > 0, scales.astype(np.float64), 1.0)
    q = _round_half_away(w64 / safe[:, None])
    q = np.clip(q, -127, 127).astype(np.int8)
    q[scales == 0] = 0
    return QuantizedMatrix(rows, cols, q, scales)


def dequantize(q):
    """Widen int8 codes back to a dense fp32 matrix via w = q * scale_r."""
    deq = q.values.astype(np.float64) * q.scales.astype(np.float64)[:, None]
    return np.ascontiguousarray(deq.astype(np.float32))


def sparse_quant_compress(w):
    """Compress an already-pruned matrix with an int8 payload.

    Thin wrapper over the bitmask container: the surviving nonzeros are
    quantized per row with the same scheme as quantize_int8 and stored next
    to the mask, with the per-row scales appended. Storage cost excluding
    scales is 1 + 8 * density bits per weight.
    """
    return compress(w, value_width="int8")


def quantized_model(model):
    """Copy a model with every linear weight passed through quantize-dequantize.

    The embedding table is left in fp32: it is a lookup table, not a linear
    weight matrix, and only the block layers and the output head take part
    in the simulated INT8 inference.
    """
    sim = model.copy()
    for name in sim.params:
        if name == "emb":
            continue
        sim.params[name] = dequantize(quantize_int8(sim.params[name]))
    return sim


def quantized_eval(model, inputs, batch):
    """Accuracy of the model with simulated INT8 linear weights.

    Deterministic given the model and split. The caller compares against the
    fp32 accuracy of the same model on the same split to get the delta.
    """
    from .training import evaluate

    accuracy, _ = evaluate(quantized_model(model), inputs, batch)
    return accuracy


def roundtrip_sparsity_preserved(w):
    """Check that quantize-dequantize leaves the exact-zero pattern unchanged.

    True for matrices coming out of magnitude pruning at the scales used
    here; a handcrafted row whose smallest survivor is below scale/2 of the
    row max would legitimately underflow to code 0, which is why this is a
    checkable predicate rather than an unconditional guarantee.
    """
    before = sparsity_of(w).sparsity
    after = sparsity_of(dequantize(quantize_int8(w))).sparsity
    return before == after
