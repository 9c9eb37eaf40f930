"""Bitmask-compressed weight storage and the bits-per-weight accounting model.

The compressed layout keeps one presence bit per weight position, packed
into 32-bit words along each row (rows are padded independently so the
column count rounds up to a multiple of 32, pad bits always zero), plus a
dense array of the surviving values in row-major scan order. Value payloads
come in three widths:

- fp32: stored exactly, decompress is the identity on the dense matrix.
- fp16: values are rounded through IEEE half precision on compress and
  widened back on decompress. Half is a storage width only, compute stays
  FP32. Magnitudes are clipped to the half-precision max (65504) before
  rounding so the finiteness invariant survives overflow.
- int8: per-row symmetric quantization of the nonzeros, scale_r =
  max|nonzero| / 127, stored alongside the payload as FP32 scales.

Storage cost per weight position is 1 + value_bits * density bits (mask bit
plus amortized payload), which for a memory-bound kernel translates to a
theoretical speedup of dense_bits / bits_per_weight. Per-row int8 scales
are excluded from that figure and reported separately where relevant.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import FormatError, check_matrix

VALUE_WIDTHS = ("fp32", "fp16", "int8")
WIDTH_BITS = {"fp32": 32, "fp16": 16, "int8": 8}
_WIDTH_DTYPE = {"fp32": np.float32, "fp16": np.float16, "int8": np.int8}
_FP16_MAX = 65504.0


def mask_words_per_row(cols):
    return (cols + 31) // 32


def _row_popcounts(mask):
    """Set bits per row of a (rows, words) uint32 mask."""
    b = np.ascontiguousarray(mask, dtype="<u4").view(np.uint8)
    return np.unpackbits(b.reshape(mask.shape[0], -1), axis=1).sum(axis=1, dtype=np.int64)


def unpack_mask(mask, cols):
    """Expand a (rows, words) uint32 mask to a (rows, cols) boolean array."""
    b = np.ascontiguousarray(mask, dtype="<u4").view(np.uint8)
    bits = np.unpackbits(b.reshape(mask.shape[0], -1), axis=1, bitorder="little")
    return bits[:, :cols].astype(bool)


def pack_mask(nz):
    """Pack a boolean (rows, cols) array into per-row little-endian 32-bit words."""
    rows, cols = nz.shape
    words = mask_words_per_row(cols)
    packed = np.packbits(nz, axis=1, bitorder="little")
    buf = np.zeros((rows, words * 4), dtype=np.uint8)
    buf[:, : packed.shape[1]] = packed
    return np.ascontiguousarray(buf.view("<u4").astype(np.uint32))


@dataclass
class BitmaskCompressed:
    rows: int
    cols: int
    mask: np.ndarray
    values: np.ndarray
    value_width: str
    scales: np.ndarray = None
    row_offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.value_width not in VALUE_WIDTHS:
            raise FormatError(f"unknown value width {self.value_width!r}")
        words = mask_words_per_row(self.cols)
        if self.mask.shape != (self.rows, words):
            raise FormatError(
                f"mask shape {self.mask.shape} does not match {self.rows} rows x {words} words"
            )
        counts = _row_popcounts(self.mask)
        if int(counts.sum()) != len(self.values):
            raise FormatError(
                f"mask popcount {int(counts.sum())} != stored value count {len(self.values)}"
            )
        pad = words * 32 - self.cols
        if pad:
            live = np.uint32((1 << (32 - pad)) - 1)
            if np.any(self.mask[:, -1] & ~live):
                raise FormatError("pad bits beyond cols are set")
        want = _WIDTH_DTYPE[self.value_width]
        if self.values.dtype != want:
            raise FormatError(f"{self.value_width} payload has dtype {self.values.dtype}")
        if self.value_width == "int8":
            if self.scales is None or self.scales.shape != (self.rows,):
                raise FormatError("int8 payload requires one fp32 scale per row")
        elif self.scales is not None:
            raise FormatError(f"{self.value_width} payload does not carry scales")
        offsets = np.zeros(self.rows + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        self.row_offsets = offsets

    @property
    def nnz(self):
        return len(self.values)

    @property
    def density(self):
        return self.nnz / (self.rows * self.cols)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _int8_rows(w, nzmask):
    """Per-row symmetric int8 quantization of the masked entries."""
    absw = np.where(nzmask, np.abs(w), 0.0).astype(np.float64)
    rowmax = absw.max(axis=1)
    scales = (rowmax / 127.0).astype(np.float32)
    safe = np.where(scales > 0, scales.astype(np.float64), 1.0)
    q = _round_half_away(w.astype(np.float64) / safe[:, None])
    q = np.clip(q, -127, 127).astype(np.int8)
    q[~nzmask] = 0
    return q, scales


def compress(w, value_width="fp32"):
    """Pack the exact-nonzero entries of a dense matrix into bitmask form."""
    w = check_matrix(w)
    if value_width not in VALUE_WIDTHS:
        raise FormatError(f"unknown value width {value_width!r}")
    rows, cols = w.shape
    nz = w != 0
    mask = pack_mask(nz)
    scales = None
    if value_width == "fp32":
        values = w[nz]
    elif value_width == "fp16":
        clipped = np.clip(w[nz], -_FP16_MAX, _FP16_MAX)
        values = clipped.astype(np.float16)
    else:
        q, scales = _int8_rows(w, nz)
        values = q[nz]
    return BitmaskCompressed(rows, cols, mask, values, value_width, scales)


def decompress(c):
    """Materialize the dense matrix a compressed container describes."""
    nz = unpack_mask(c.mask, c.cols)
    out = np.zeros((c.rows, c.cols), dtype=np.float32)
    if c.value_width == "fp32":
        out[nz] = c.values
    elif c.value_width == "fp16":
        out[nz] = c.values.astype(np.float32)
    else:
        counts = np.diff(c.row_offsets)
        rowidx = np.repeat(np.arange(c.rows), counts)
        deq = c.values.astype(np.float64) * c.scales.astype(np.float64)[rowidx]
        out[nz] = deq.astype(np.float32)
    return out


def bits_per_weight(value_bits, density):
    """Average storage bits per weight position: 1 mask bit + amortized payload."""
    if value_bits not in (32, 16, 8):
        raise ValueError(f"value_bits must be 32, 16 or 8, got {value_bits}")
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must be in [0, 1], got {density}")
    return 1.0 + value_bits * density


def theoretical_speedup(dense_bits, value_bits, density):
    """Memory-bound speedup bound: dense bits over compressed bits per weight."""
    if dense_bits <= 0:
        raise ValueError(f"dense_bits must be positive, got {dense_bits}")
    return dense_bits / bits_per_weight(value_bits, density)


def compression_ratio_to_sparsity(ratio):
    """A ratio-r compressed model keeps 1/r of its weights: s = 1 - 1/r."""
    if ratio < 1.0:
        raise ValueError(f"compression ratio must be >= 1, got {ratio}")
    return 1.0 - 1.0 / ratio


def sparsity_to_compression_ratio(sparsity):
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    return 1.0 / (1.0 - sparsity)


@dataclass
class SparsityStats:
    sparsity: float
    nnz: int
    bits_per_weight: float
    theoretical_speedup: float


def sparsity_of(w, value_width="fp32"):
    """Exact-zero sparsity stats, with byte accounting at the given payload width.

    The dense baseline for the speedup figure is the same width as the
    payload (a dense fp16 model against a bitmask fp16 model, and so on).
    """
    w = check_matrix(w)
    nnz = int(np.count_nonzero(w))
    total = w.size
    sparsity = 1.0 - nnz / total
    bits = WIDTH_BITS[value_width]
    bpw = bits_per_weight(bits, nnz / total)
    return SparsityStats(sparsity, nnz, bpw, bits / bpw)


@dataclass(frozen=True)
class NMPattern:
    n: int
    m: int

    def __post_init__(self):
        if not (1 <= self.n <= self.m):
            raise ValueError(f"need 1 <= n <= m, got {self.n}:{self.m}")

    @property
    def sparsity(self):
        return 1.0 - self.n / self.m

    def __str__(self):
        return f"{self.n}:{self.m}"


def parse_nm(text):
    """Parse a pattern string like "2:4" or "16:32"."""
    parts = text.split(":")
    if len(parts) != 2:
        raise ValueError(f"bad N:M pattern {text!r}")
    try:
        n, m = int(parts[0]), int(parts[1])
    except ValueError:
        raise ValueError(f"bad N:M pattern {text!r}") from None
    return NMPattern(n, m)


def conforms_nm(w, pattern):
    """True iff every length-m block along each row has at most n nonzeros."""
    w = check_matrix(w)
    rows, cols = w.shape
    if cols % pattern.m != 0:
        raise ValueError(f"block length {pattern.m} does not divide cols={cols}")
    blocks = (w != 0).reshape(rows, cols // pattern.m, pattern.m)
    return bool(np.all(blocks.sum(axis=2) <= pattern.n))


_SKBC_MAGIC = b"SKBC"


def save_skbc(path, c):
    """Container layout: magic, u32 rows, u32 cols, u8 width tag (32/16/8),
    mask words little-endian, packed values, then per-row fp32 scales for int8."""
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIIB", _SKBC_MAGIC, c.rows, c.cols, WIDTH_BITS[c.value_width]))
        f.write(c.mask.astype("<u4").tobytes())
        if c.value_width == "fp32":
            f.write(c.values.astype("<f4").tobytes())
        elif c.value_width == "fp16":
            f.write(c.values.astype("<f2").tobytes())
        else:
            f.write(c.values.astype("i1").tobytes())
            f.write(c.scales.astype("<f4").tobytes())


def load_skbc(path):
    with open(path, "rb") as f:
        head = f.read(13)
        if len(head) != 13:
            raise FormatError(f"{path}: truncated header")
        magic, rows, cols, tag = struct.unpack("<4sIIB", head)
        if magic != _SKBC_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        by_tag = {32: "fp32", 16: "fp16", 8: "int8"}
        if tag not in by_tag:
            raise FormatError(f"{path}: unknown width tag {tag}")
        width = by_tag[tag]
        words = mask_words_per_row(cols)
        mask_bytes = f.read(rows * words * 4)
        if len(mask_bytes) != rows * words * 4:
            raise FormatError(f"{path}: truncated mask section")
        mask = np.frombuffer(mask_bytes, dtype="<u4").reshape(rows, words)
        mask = np.ascontiguousarray(mask.astype(np.uint32))
        nnz = int(_row_popcounts(mask).sum())
        vbytes = {"fp32": 4, "fp16": 2, "int8": 1}[width]
        value_bytes = f.read(nnz * vbytes)
        if len(value_bytes) != nnz * vbytes:
            raise FormatError(
                f"{path}: value payload is {len(value_bytes)} bytes, "
                f"mask popcount {nnz} needs {nnz * vbytes}"
            )
        scales = None
        if width == "int8":
            scale_bytes = f.read(rows * 4)
            if len(scale_bytes) != rows * 4:
                raise FormatError(f"{path}: truncated scale section")
            scales = np.frombuffer(scale_bytes, dtype="<f4").astype(np.float32)
        trailing = f.read()
    if trailing:
        raise FormatError(f"{path}: {len(trailing)} trailing bytes")
    dt = {"fp32": "<f4", "fp16": "<f2", "int8": "i1"}[width]
    values = np.frombuffer(value_bytes, dtype=dt)
    values = np.ascontiguousarray(values.astype(_WIDTH_DTYPE[width]))
    return BitmaskCompressed(rows, cols, mask, values, width, scales)
