import numpy as np
import pytest

from sparsekit import formats, tensor
from sparsekit.tensor import FormatError


def random_sparse(gen, rows, cols, sparsity):
    w = tensor.random_matrix(rows, cols, gen)
    drop = gen.random((rows, cols)) < sparsity
    w[drop] = 0.0
    return w


def test_compress_all_zero():
    c = formats.compress(np.zeros((2, 32), dtype=np.float32))
    assert c.mask.shape == (2, 1)
    assert np.all(c.mask == 0)
    assert len(c.values) == 0


def test_compress_fully_dense_row():
    w = np.arange(1, 33, dtype=np.float32).reshape(1, 32)
    c = formats.compress(w)
    assert c.mask[0, 0] == 0xFFFFFFFF
    assert len(c.values) == 32
    assert np.array_equal(c.values, w[0])


def test_roundtrip_fp32_50pct():
    w = random_sparse(tensor.rng(0), 64, 64, 0.5)
    assert np.array_equal(formats.decompress(formats.compress(w)), w)


def test_roundtrip_fp32_property():
    gen = tensor.rng(100)
    for i in range(100):
        rows = int(gen.integers(1, 40))
        cols = int(gen.integers(1, 90))
        w = random_sparse(gen, rows, cols, float(gen.random()))
        assert np.array_equal(formats.decompress(formats.compress(w)), w)


def test_roundtrip_edge_cases():
    zero = np.zeros((3, 40), dtype=np.float32)
    assert np.array_equal(formats.decompress(formats.compress(zero)), zero)
    dense = tensor.random_matrix(5, 33, tensor.rng(4))
    assert np.array_equal(formats.decompress(formats.compress(dense)), dense)
    single = np.zeros((7, 45), dtype=np.float32)
    single[3, 44] = -2.5
    assert np.array_equal(formats.decompress(formats.compress(single)), single)


def test_decompress_zero_mask_empty_values():
    c = formats.BitmaskCompressed(
        2, 32, np.zeros((2, 1), dtype=np.uint32), np.zeros(0, dtype=np.float32), "fp32"
    )
    assert np.array_equal(formats.decompress(c), np.zeros((2, 32), dtype=np.float32))


def test_values_in_row_major_scan_order():
    w = np.array([[0.0, 1.0, 0.0, 2.0], [3.0, 0.0, 0.0, 4.0]], dtype=np.float32)
    c = formats.compress(w)
    assert np.array_equal(c.values, np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32))
    assert np.array_equal(c.row_offsets, np.array([0, 2, 4]))


def test_fp16_payload_rounds_through_half():
    w = random_sparse(tensor.rng(8), 16, 48, 0.4)
    c = formats.compress(w, "fp16")
    assert c.values.dtype == np.float16
    back = formats.decompress(c)
    expect = np.where(w != 0, w.astype(np.float16).astype(np.float32), 0.0)
    assert np.array_equal(back, expect)


def test_fp16_payload_clips_overflow():
    w = np.array([[1e30, -1e30, 0.0, 2.0]], dtype=np.float32)
    c = formats.compress(w, "fp16")
    back = formats.decompress(c)
    assert np.all(np.isfinite(back))
    assert back[0, 0] == np.float32(np.float16(65504.0))
    assert back[0, 1] == -np.float32(np.float16(65504.0))


def test_int8_payload_scale_and_bound():
    gen = tensor.rng(21)
    for _ in range(25):
        w = random_sparse(gen, 12, 64, 0.5)
        c = formats.compress(w, "int8")
        assert c.values.dtype == np.int8
        assert c.scales.shape == (12,)
        rowmax = np.max(np.abs(w), axis=1)
        assert np.allclose(c.scales, (rowmax / 127.0).astype(np.float32))
        back = np.zeros_like(w, dtype=np.float64)
        nz = w != 0
        counts = np.diff(c.row_offsets)
        rowidx = np.repeat(np.arange(12), counts)
        back[nz] = c.values.astype(np.float64) * c.scales.astype(np.float64)[rowidx]
        err = np.abs(back - w.astype(np.float64))
        assert np.all(err <= c.scales.astype(np.float64)[:, None] / 2.0 + 1e-12)


def test_int8_zero_row_zero_scale():
    w = np.zeros((3, 32), dtype=np.float32)
    w[1, 5] = 4.0
    c = formats.compress(w, "int8")
    assert c.scales[0] == 0.0 and c.scales[2] == 0.0
    assert c.scales[1] == np.float32(4.0 / 127.0)


def test_mask_value_coherence_checked():
    w = random_sparse(tensor.rng(5), 4, 32, 0.5)
    c = formats.compress(w)
    with pytest.raises(FormatError):
        formats.BitmaskCompressed(c.rows, c.cols, c.mask, c.values[:-1], "fp32")


def test_pad_bits_must_be_zero():
    mask = np.full((1, 1), 0xFFFFFFFF, dtype=np.uint32)
    with pytest.raises(FormatError):
        formats.BitmaskCompressed(1, 20, mask, np.ones(32, dtype=np.float32), "fp32")


def test_bits_per_weight_values():
    assert formats.bits_per_weight(16, 0.5) == 9.0
    assert formats.bits_per_weight(16, 1.0) == 17.0
    assert formats.bits_per_weight(8, 0.2) == pytest.approx(2.6)
    with pytest.raises(ValueError):
        formats.bits_per_weight(16, 1.5)
    with pytest.raises(ValueError):
        formats.bits_per_weight(12, 0.5)


def test_bits_per_weight_monotone_in_density():
    d = np.linspace(0, 1, 21)
    vals = [formats.bits_per_weight(16, x) for x in d]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_theoretical_speedup_values():
    s = formats.theoretical_speedup(16, 16, 0.5)
    assert round(s, 2) == 1.78
    assert abs(s - 1.77) <= 0.011
    assert formats.theoretical_speedup(16, 16, 1.0) == pytest.approx(16.0 / 17.0)
    assert formats.theoretical_speedup(32, 8, 0.2) == pytest.approx(32.0 / 2.6)
    vals = [formats.theoretical_speedup(16, 16, d) for d in np.linspace(0.05, 1, 20)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_ratio_sparsity_map():
    assert formats.compression_ratio_to_sparsity(2.0) == 0.5
    assert round(100 * formats.compression_ratio_to_sparsity(3.0)) == 67
    assert formats.compression_ratio_to_sparsity(10.0) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        formats.compression_ratio_to_sparsity(0.9)


def test_ratio_sparsity_inverse():
    for r in (1.0, 1.7, 2.0, 3.3, 5.0, 10.0):
        s = formats.compression_ratio_to_sparsity(r)
        assert formats.sparsity_to_compression_ratio(s) == pytest.approx(r, rel=1e-12)
    with pytest.raises(ValueError):
        formats.sparsity_to_compression_ratio(1.0)


def test_sparsity_of():
    assert formats.sparsity_of(np.zeros((4, 4), dtype=np.float32)).sparsity == 1.0
    dense = tensor.random_matrix(32, 32, tensor.rng(9))
    assert formats.sparsity_of(dense).sparsity == 0.0
    w = np.ones((3, 4), dtype=np.float32)
    w[0, 0] = w[1, 1] = w[2, 2] = 0.0
    st = formats.sparsity_of(w)
    assert st.sparsity == 0.25
    assert st.nnz == 9
    assert st.bits_per_weight == pytest.approx(1 + 32 * 0.75)


def test_sparsity_of_width_accounting():
    w = random_sparse(tensor.rng(13), 20, 64, 0.5)
    st = formats.sparsity_of(w, "fp16")
    density = 1.0 - st.sparsity
    assert st.bits_per_weight == pytest.approx(1 + 16 * density)
    assert st.theoretical_speedup == pytest.approx(16 / (1 + 16 * density))


def test_nm_pattern_parse_and_validate():
    p = formats.parse_nm("2:4")
    assert (p.n, p.m) == (2, 4)
    assert p.sparsity == 0.5
    with pytest.raises(ValueError):
        formats.parse_nm("banana")
    with pytest.raises(ValueError):
        formats.parse_nm("5:4")
    with pytest.raises(ValueError):
        formats.NMPattern(0, 4)


def test_conforms_nm():
    w = np.array([[1.0, 0.0, 2.0, 0.0], [0.0, 3.0, 0.0, 4.0]], dtype=np.float32)
    assert formats.conforms_nm(w, formats.NMPattern(2, 4))
    assert not formats.conforms_nm(np.ones((2, 4), dtype=np.float32), formats.NMPattern(2, 4))
    with pytest.raises(ValueError):
        formats.conforms_nm(w, formats.NMPattern(2, 3))


@pytest.mark.parametrize("width", formats.VALUE_WIDTHS)
def test_skbc_roundtrip(tmp_path, width):
    w = random_sparse(tensor.rng(77), 10, 50, 0.6)
    c = formats.compress(w, width)
    path = tmp_path / f"m.{width}.skbc"
    formats.save_skbc(path, c)
    c2 = formats.load_skbc(path)
    assert c2.value_width == width
    assert np.array_equal(c2.mask, c.mask)
    assert np.array_equal(c2.values, c.values)
    if width == "int8":
        assert np.array_equal(c2.scales, c.scales)
    assert np.array_equal(formats.decompress(c2), formats.decompress(c))


def test_skbc_rejects_value_mismatch(tmp_path):
    w = random_sparse(tensor.rng(3), 6, 32, 0.5)
    path = tmp_path / "m.skbc"
    formats.save_skbc(path, formats.compress(w))
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(FormatError):
        formats.load_skbc(path)


def test_skbc_rejects_trailing_garbage(tmp_path):
    w = random_sparse(tensor.rng(3), 6, 32, 0.5)
    path = tmp_path / "m.skbc"
    formats.save_skbc(path, formats.compress(w))
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError):
        formats.load_skbc(path)


def test_skbc_rejects_bad_magic_and_tag(tmp_path):
    w = random_sparse(tensor.rng(3), 2, 32, 0.5)
    path = tmp_path / "m.skbc"
    formats.save_skbc(path, formats.compress(w))
    data = bytearray(path.read_bytes())
    data[:4] = b"WHAT"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        formats.load_skbc(path)
    data[:4] = b"SKBC"
    data[12] = 7
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        formats.load_skbc(path)
