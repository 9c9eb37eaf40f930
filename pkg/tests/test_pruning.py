import numpy as np
import pytest

from sparsekit import formats, pruning, tensor


def test_prune_sparsity_zero_is_identity():
    w = tensor.random_matrix(6, 6, tensor.rng(0))
    out, mask = pruning.magnitude_prune(w, 0.0)
    assert np.array_equal(out, w)
    assert mask.all()


def test_prune_sparsity_one_is_zero():
    w = tensor.random_matrix(6, 6, tensor.rng(1))
    out, mask = pruning.magnitude_prune(w, 1.0)
    assert not out.any()
    assert not mask.any()


def test_prune_hand_case():
    w = np.array([[1.0, -4.0], [3.0, -2.0]], dtype=np.float32)
    out, mask = pruning.magnitude_prune(w, 0.5)
    assert np.array_equal(out, np.array([[0.0, -4.0], [3.0, 0.0]], dtype=np.float32))
    assert np.array_equal(mask, np.array([[False, True], [True, False]]))


def test_prune_tie_break_row_major():
    w = np.ones((1, 4), dtype=np.float32)
    out, _ = pruning.magnitude_prune(w, 0.5)
    assert np.array_equal(out, np.array([[0.0, 0.0, 1.0, 1.0]], dtype=np.float32))


def test_prune_rounds_half_up():
    w = np.array([[1.0, 2.0, 3.0, 4.0]], dtype=np.float32)
    out, _ = pruning.magnitude_prune(w, 0.375)  # k = round(1.5) = 2
    assert np.count_nonzero(out) == 2


def test_prune_against_sort_oracle():
    gen = tensor.rng(10)
    for _ in range(20):
        rows = int(gen.integers(1, 64))
        cols = int(gen.integers(1, 64))
        w = tensor.random_matrix(rows, cols, gen)
        s = float(gen.random())
        out, mask = pruning.magnitude_prune(w, s)
        k = int(np.floor(s * w.size + 0.5))
        assert np.count_nonzero(~mask) == k
        if 0 < k < w.size:
            dropped = np.abs(w[~mask])
            kept = np.abs(w[mask])
            assert dropped.max() <= kept.min()


def test_prune_monotone_nesting():
    w = tensor.random_matrix(24, 24, tensor.rng(3))
    _, m1 = pruning.magnitude_prune(w, 0.3)
    _, m2 = pruning.magnitude_prune(w, 0.7)
    assert np.all(m2 <= m1)  # kept at 0.7 is a subset of kept at 0.3
    assert m2.sum() < m1.sum()


def test_nm_identity_when_n_equals_m():
    w = tensor.random_matrix(4, 8, tensor.rng(5))
    out, mask = pruning.nm_project(w, formats.NMPattern(4, 4))
    assert np.array_equal(out, w)
    assert mask.all()


def test_nm_hand_block():
    w = np.array([[4.0, 1.0, 3.0, 2.0]], dtype=np.float32)
    out, _ = pruning.nm_project(w, formats.NMPattern(2, 4))
    assert np.array_equal(out, np.array([[4.0, 0.0, 3.0, 0.0]], dtype=np.float32))


def test_nm_tie_keeps_lower_index():
    w = np.full((1, 4), 2.0, dtype=np.float32)
    out, _ = pruning.nm_project(w, formats.NMPattern(2, 4))
    assert np.array_equal(out, np.array([[2.0, 2.0, 0.0, 0.0]], dtype=np.float32))


def test_nm_sparsity_exact():
    for n, m, expect in ((2, 4, 0.5), (16, 32, 0.5), (16, 64, 0.75), (16, 128, 0.875)):
        w = tensor.random_matrix(8, 2 * m, tensor.rng(n * m))
        out, _ = pruning.nm_project(w, formats.NMPattern(n, m))
        assert formats.sparsity_of(out).sparsity == expect
        assert formats.conforms_nm(out, formats.NMPattern(n, m))


def test_nm_requires_divisible_cols():
    w = tensor.random_matrix(2, 10, tensor.rng(0))
    with pytest.raises(ValueError):
        pruning.nm_project(w, formats.NMPattern(2, 4))


def test_nm_matches_bruteforce_small_blocks():
    from itertools import combinations

    gen = tensor.rng(40)
    for m in (2, 4, 8):
        for n in range(1, m + 1):
            w = tensor.random_matrix(6, 2 * m, gen)
            out, mask = pruning.nm_project(w, formats.NMPattern(n, m))
            blocks = w.reshape(6, -1, m)
            bmask = mask.reshape(6, -1, m)
            for r in range(blocks.shape[0]):
                for b in range(blocks.shape[1]):
                    block = blocks[r, b]
                    best = max(
                        combinations(range(m), n),
                        key=lambda idx: (sum(abs(float(block[i])) for i in idx), [-i for i in idx]),
                    )
                    assert set(np.flatnonzero(bmask[r, b])) == set(best)


def test_freeze_mask():
    g = np.arange(6, dtype=np.float32).reshape(2, 3)
    full = np.ones((2, 3), dtype=bool)
    assert np.array_equal(pruning.freeze_mask(g, full), g)
    empty = np.zeros((2, 3), dtype=bool)
    assert not pruning.freeze_mask(g, empty).any()
    with pytest.raises(ValueError):
        pruning.freeze_mask(g, np.ones((3, 2), dtype=bool))


def test_schedule_validation():
    with pytest.raises(ValueError):
        pruning.SparsitySchedule((0.5, 0.5), 1)
    with pytest.raises(ValueError):
        pruning.SparsitySchedule((0.9, 0.5), 1)
    with pytest.raises(ValueError):
        pruning.SparsitySchedule((0.0, 0.5), 1)
    s = pruning.SparsitySchedule([0.5, 0.75, 0.9], 2)
    assert s.levels == (0.5, 0.75, 0.9)


def test_run_schedule_phases():
    w = tensor.random_matrix(16, 16, tensor.rng(8))
    state = {"w": w}
    calls = []

    def pruner(st, level):
        st["w"], _ = pruning.magnitude_prune(st["w"], level)
        return formats.sparsity_of(st["w"]).sparsity

    def finetune(st, level, epochs):
        calls.append((level, epochs))
        return {"loss": 0.0}

    _, history = pruning.run_schedule(state, pruning.SparsitySchedule([0.5, 0.75, 0.9], 2), pruner, finetune)
    assert [h["level"] for h in history] == [0.5, 0.75, 0.9]
    for h in history:
        assert abs(h["sparsity"] - h["level"]) <= 1.0 / w.size
    assert calls == [(0.5, 2), (0.75, 2), (0.9, 2)]


def test_run_schedule_single_level_is_one_shot():
    w = tensor.random_matrix(8, 8, tensor.rng(9))
    state = {"w": w.copy()}

    def pruner(st, level):
        st["w"], _ = pruning.magnitude_prune(st["w"], level)
        return formats.sparsity_of(st["w"]).sparsity

    def finetune(st, level, epochs):
        return {}

    _, history = pruning.run_schedule(state, pruning.SparsitySchedule([0.5], 3), pruner, finetune)
    oneshot, _ = pruning.magnitude_prune(w, 0.5)
    assert np.array_equal(state["w"], oneshot)
    assert len(history) == 1


def test_run_schedule_empty():
    class Never:
        def __call__(self, *a):
            raise AssertionError("should not be called")

    model = object()
    out, history = pruning.run_schedule(
        model, pruning.SparsitySchedule((), 1), Never(), Never()
    )
    assert out is model
    assert history == []


def test_run_schedule_attaches_level_to_failures():
    def pruner(model, level):
        if level > 0.6:
            raise ValueError("boom")
        return level

    def finetune(model, level, epochs):
        return {}

    with pytest.raises(RuntimeError, match="0.75"):
        pruning.run_schedule(None, pruning.SparsitySchedule([0.5, 0.75], 1), pruner, finetune)


def test_skbm_roundtrip(tmp_path):
    gen = tensor.rng(12)
    w = tensor.random_matrix(9, 45, gen)
    _, mask = pruning.magnitude_prune(w, 0.6)
    path = tmp_path / "m.skbm"
    pruning.save_skbm(path, mask)
    assert np.array_equal(pruning.load_skbm(path), mask)


def test_skbm_rejects_corrupt(tmp_path):
    path = tmp_path / "m.skbm"
    pruning.save_skbm(path, np.ones((3, 33), dtype=bool))
    data = path.read_bytes()
    path.write_bytes(data[:-2])
    with pytest.raises(tensor.FormatError):
        pruning.load_skbm(path)
