"""Latency benchmark harness for the sparse matvec kernels.

Self-speedup methodology: time the dense fp32 matvec on a shape, then time
the bitmask kernel on pruned copies of the same matrix at each requested
sparsity, and report dense_median / sparse_median. Every timed kernel is
first re-verified against the decompress-plus-dense oracle on the exact
buffers being timed. A requested sparsity of 0.0 means "no pruning" and is
measured as the dense kernel against itself, so its self-speedup is 1 up to
timing noise.

The dense baseline is always the fp32 dense kernel: half-precision compute
does not exist natively on the CPU, so fp16 and int8 payload runs measure
their bandwidth advantage against the fp32 dense pass, while the analytic
model (bits_per_weight, theoretical_speedup) prices a same-width dense
baseline separately.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import kernels, tensor
from .formats import WIDTH_BITS, VALUE_WIDTHS, compress, decompress

BENCH_CSV_HEADER = (
    "shape_rows,shape_cols,sparsity,value_width,threads,"
    "median_ns,mean_ns,p95_ns,bytes_moved,gbps,self_speedup"
)
MIN_REPS = 30
TIMER_WARN_FACTOR = 100


@dataclass
class BenchResult:
    rows: int
    cols: int
    sparsity: float
    value_width: str
    threads: int
    reps: int
    warmup: int
    median_ns: float
    mean_ns: float
    p95_ns: float
    bytes_moved: int
    self_speedup: float
    timer_warning: bool = False

    @property
    def gbps(self):
        """Effective bandwidth: bytes moved per nanosecond equals GB/s."""
        return self.bytes_moved / self.median_ns

    def csv_row(self):
        return (
            f"{self.rows},{self.cols},{self.sparsity:g},{self.value_width},"
            f"{self.threads},{self.median_ns:.0f},{self.mean_ns:.0f},"
            f"{self.p95_ns:.0f},{self.bytes_moved},{self.gbps:.4f},"
            f"{self.self_speedup:.4f}"
        )


def bench_csv(results):
    lines = [BENCH_CSV_HEADER]
    lines.extend(r.csv_row() for r in results)
    return "\n".join(lines) + "\n"


def bytes_moved(shape, value_width, density, mode):
    """Analytic weight-traffic model for one matvec pass."""
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ValueError(f"invalid shape {shape}")
    if value_width not in VALUE_WIDTHS:
        raise ValueError(f"unknown value width {value_width!r}")
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must be in [0, 1], got {density}")
    value_bytes = WIDTH_BITS[value_width] // 8
    if mode == "dense":
        return rows * cols * value_bytes
    if mode == "bitmask":
        words = (cols + 31) // 32
        nnz = int(round(rows * cols * density))
        total = rows * words * 4 + nnz * value_bytes
        if value_width == "int8":
            total += rows * 4
        return total
    raise ValueError(f"mode must be 'dense' or 'bitmask', got {mode!r}")


def timer_resolution_ns(samples=300):
    """Smallest observed positive increment of the monotonic clock."""
    best = None
    for _ in range(samples):
        a = time.perf_counter_ns()
        b = time.perf_counter_ns()
        while b == a:
            b = time.perf_counter_ns()
        tick = b - a
        if best is None or tick < best:
            best = tick
    return best


def _time_ns(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    out = np.empty(reps, dtype=np.int64)
    for i in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        out[i] = time.perf_counter_ns() - t0
    return out


def _summarize(ts):
    return float(np.median(ts)), float(ts.mean()), float(np.percentile(ts, 95))


def run_bench(shape, sparsities, value_width="fp32", reps=50, warmup=5,
              threads=1, tile_rows=128, seed=0, csv_path=None):
    """Benchmark one shape across sparsities; first result row is the dense
    baseline (value_width "dense"), then one row per requested sparsity.

    threads == 1 times the sequential kernel; more threads time the tiled
    parallel path. Returns the BenchResult list and optionally writes the
    CSV to csv_path.
    """
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}, got {reps}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    if not 1 <= threads <= kernels.max_threads():
        raise ValueError(
            f"threads must be in [1, {kernels.max_threads()}], got {threads}")
    if value_width not in VALUE_WIDTHS:
        raise ValueError(f"unknown value width {value_width!r}")
    rows, cols = shape
    gen = tensor.rng(seed)
    w = tensor.random_matrix(rows, cols, gen)
    x = tensor.random_matrix(1, cols, gen)[0]
    kernels.warmup()
    tick = timer_resolution_ns()

    dense_ts = _time_ns(lambda: tensor.dense_matvec(w, x), reps, warmup)
    dense_med, dense_mean, dense_p95 = _summarize(dense_ts)
    results = [BenchResult(
        rows, cols, 0.0, "dense", 1, reps, warmup,
        dense_med, dense_mean, dense_p95,
        bytes_moved(shape, "fp32", 1.0, "dense"), 1.0,
        dense_med < TIMER_WARN_FACTOR * tick)]

    for sparsity in sparsities:
        if not 0.0 <= sparsity < 1.0:
            raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
        if sparsity == 0.0:
            # No pruning requested: the honest comparison is the dense
            # kernel against its own baseline timing.
            ts = _time_ns(lambda: tensor.dense_matvec(w, x), reps, warmup)
            med, mean, p95 = _summarize(ts)
            results.append(BenchResult(
                rows, cols, 0.0, value_width, 1, reps, warmup, med, mean,
                p95, bytes_moved(shape, "fp32", 1.0, "dense"),
                dense_med / med, med < TIMER_WARN_FACTOR * tick))
            continue
        ws = w.copy()
        ws[gen.random(ws.shape) < sparsity] = 0.0
        c = compress(ws, value_width)
        if threads == 1:
            fn = lambda: kernels.sparse_matvec(c, x)  # noqa: E731
        else:
            fn = lambda: kernels.sparse_matvec_tiled(  # noqa: E731
                c, x, tile_rows=tile_rows, threads=threads)
        _verify(c, x, fn())
        ts = _time_ns(fn, reps, warmup)
        med, mean, p95 = _summarize(ts)
        results.append(BenchResult(
            rows, cols, sparsity, value_width, threads, reps, warmup,
            med, mean, p95,
            bytes_moved(shape, value_width, c.density, "bitmask"),
            dense_med / med, med < TIMER_WARN_FACTOR * tick))

    if csv_path is not None:
        with open(csv_path, "w") as fh:
            fh.write(bench_csv(results))
    return results


def _verify(c, x, y):
    """Correctness gate: the timed kernel must match the dense oracle."""
    ref = tensor.dense_matvec(decompress(c), x)
    tol = 1e-4 if c.value_width == "int8" else 1e-5
    denom = max(float(np.abs(ref).max()), 1e-6)
    err = float(np.abs(y - ref).max()) / denom
    if err > tol:
        raise RuntimeError(
            f"kernel failed the oracle gate: rel err {err:.3g} > {tol:g}")
