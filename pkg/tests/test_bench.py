"""Benchmark harness: traffic model, bookkeeping, gates. Timing-light."""

import numpy as np
import pytest

from sparsekit import bench, formats, kernels, tensor


@pytest.fixture(scope="module", autouse=True)
def _compiled():
    kernels.warmup()


def test_bytes_moved_dense_examples():
    assert bench.bytes_moved((1, 32), "fp32", 1.0, "dense") == 128
    assert bench.bytes_moved((4096, 12288), "fp32", 1.0, "dense") == 192 * 1024 * 1024


def test_bytes_moved_bitmask_nine_bits_example():
    got = bench.bytes_moved((1, 32), "fp16", 0.5, "bitmask")
    assert got == 36
    assert got == formats.bits_per_weight(16, 0.5) * 32 / 8


def test_bytes_moved_int8_counts_scales():
    got = bench.bytes_moved((2, 32), "int8", 0.25, "bitmask")
    assert got == 2 * 4 + 16 * 1 + 2 * 4


def test_bytes_moved_crossover_matches_formula():
    # With cols a multiple of 32 there is no pad slack, so the byte model
    # and the bits-per-weight model agree exactly and cross over together.
    shape = (8, 64)
    dense = bench.bytes_moved(shape, "fp32", 1.0, "dense")
    # Densities chosen so rows*cols*density is an integer: the byte model
    # quantizes nnz, the bits model does not, and at these points they agree
    # exactly and cross over together.
    for density in (0.125, 0.5, 31 / 32, 1.0):
        bm = bench.bytes_moved(shape, "fp32", density, "bitmask")
        bpw = formats.bits_per_weight(32, density)
        assert bm * 8 == bpw * 8 * 64
        assert (bm <= dense) == (bpw <= 32.0)


def test_bytes_moved_validation():
    with pytest.raises(ValueError):
        bench.bytes_moved((0, 4), "fp32", 0.5, "dense")
    with pytest.raises(ValueError):
        bench.bytes_moved((1, 4), "fp8", 0.5, "dense")
    with pytest.raises(ValueError):
        bench.bytes_moved((1, 4), "fp32", 1.5, "bitmask")
    with pytest.raises(ValueError):
        bench.bytes_moved((1, 4), "fp32", 0.5, "csr")


def test_run_bench_rows_and_schema(tmp_path):
    out = tmp_path / "bench.csv"
    results = bench.run_bench((64, 256), (0.5, 0.9), reps=30, warmup=1,
                              csv_path=str(out))
    assert len(results) == 3
    assert results[0].value_width == "dense"
    assert results[0].self_speedup == 1.0
    assert [r.sparsity for r in results] == [0.0, 0.5, 0.9]
    text = out.read_text()
    lines = text.strip().split("\n")
    assert lines[0] == bench.BENCH_CSV_HEADER
    assert len(lines) == 4
    for line in lines[1:]:
        assert len(line.split(",")) == 11
    assert text == bench.bench_csv(results)


def test_run_bench_records_configuration():
    results = bench.run_bench((32, 128), (0.75,), value_width="int8",
                              reps=31, warmup=1)
    sparse_row = results[1]
    assert (sparse_row.rows, sparse_row.cols) == (32, 128)
    assert sparse_row.value_width == "int8"
    assert sparse_row.reps == 31 and sparse_row.warmup == 1
    assert sparse_row.threads == 1
    assert sparse_row.bytes_moved < results[0].bytes_moved


def test_sparsity_zero_is_dense_self_comparison():
    results = bench.run_bench((512, 1024), (0.0,), reps=30, warmup=2)
    row = results[1]
    assert row.sparsity == 0.0
    assert 0.8 <= row.self_speedup <= 1.25
    assert row.bytes_moved == results[0].bytes_moved


def test_validation_errors():
    with pytest.raises(ValueError):
        bench.run_bench((8, 32), (0.5,), reps=29)
    with pytest.raises(ValueError):
        bench.run_bench((8, 32), (0.5,), reps=30, warmup=0)
    with pytest.raises(ValueError):
        bench.run_bench((8, 32), (0.5,), reps=30,
                        threads=kernels.max_threads() + 1)
    with pytest.raises(ValueError):
        bench.run_bench((8, 32), (0.5,), reps=30, value_width="fp64")
    with pytest.raises(ValueError):
        bench.run_bench((8, 32), (1.0,), reps=30)


def test_correctness_gate_trips_on_broken_kernel(monkeypatch):
    def broken(c, x):
        return np.zeros(c.rows, dtype=np.float32)

    monkeypatch.setattr(kernels, "sparse_matvec", broken)
    with pytest.raises(RuntimeError, match="oracle gate"):
        bench.run_bench((16, 64), (0.5,), reps=30, warmup=1)


def test_timer_warning_flag(monkeypatch):
    monkeypatch.setattr(bench, "timer_resolution_ns", lambda samples=300: 10**12)
    results = bench.run_bench((16, 64), (0.5,), reps=30, warmup=1)
    assert all(r.timer_warning for r in results)


def test_timer_resolution_is_positive():
    tick = bench.timer_resolution_ns(samples=50)
    assert isinstance(tick, int) and tick > 0


def test_bookkeeping_reps_independent():
    a = bench.run_bench((32, 96), (0.5, 0.75), reps=30, warmup=1)
    b = bench.run_bench((32, 96), (0.5, 0.75), reps=40, warmup=1)
    assert len(a) == len(b) == 3
    assert [r.bytes_moved for r in a] == [r.bytes_moved for r in b]
    assert [r.sparsity for r in a] == [r.sparsity for r in b]


def test_gbps_definition():
    r = bench.BenchResult(1, 1, 0.5, "fp32", 1, 30, 1,
                          2000.0, 2100.0, 2500.0, 4000, 1.5)
    assert r.gbps == pytest.approx(2.0)


def test_speedup_definition_against_rows():
    results = bench.run_bench((128, 512), (0.9,), reps=30, warmup=1)
    dense, sparse = results
    assert sparse.self_speedup == pytest.approx(dense.median_ns / sparse.median_ns)
