"""Gradual-pruning experiment mode and the lr-window continuation."""

import numpy as np
import pytest

from sparsekit import experiment, training
from sparsekit.model import TinyModel, TinyModelConfig
from sparsekit.task import SyntheticTask
from sparsekit.tensor import rng


def _setup():
    task = SyntheticTask(vocab=8, seq=8, seed=0, train_size=256,
                         val_size=64, test_size=64)
    cfg = TinyModelConfig(vocab=8, seq=8, d_model=16, blocks=1)
    teacher, _ = experiment.train_teacher(task, cfg, epochs=4, lr=0.1, seed=2)
    return task, teacher


TASK, TEACHER = _setup()


@pytest.mark.parametrize("restart", [True, False])
def test_schedule_mode_reaches_target_sparsity(restart):
    report = experiment.run_recovery_experiment(
        sparsities=(0.9,), variants=("ce",), seeds=(10,),
        task=TASK, teacher=TEACHER, epochs=6, finetune_size=64,
        prune_mode="schedule", schedule_levels=(0.5, 0.75, 0.9),
        restart_schedule_per_level=restart, quantize=False)
    assert len(report.records) == 1
    row = report.records[0]
    assert not row.failed
    assert np.isfinite(row.accuracy)


def test_schedule_run_hits_each_level_and_final_mask():
    student, diverged = experiment._schedule_run(
        TEACHER, SyntheticTask(vocab=8, seq=8, seed=1, train_size=64,
                               val_size=8, test_size=8),
        "ce", 0.9, 10, levels=(0.5, 0.75, 0.9), epochs=6,
        epochs_per_level=2, restart=True, lr=0.05, lam=1.0, batch_size=32)
    assert not diverged
    assert student.prunable_sparsity() == pytest.approx(0.9, abs=0.01)
    assert student.masks


def test_schedule_target_below_all_levels_is_single_stage():
    student, _ = experiment._schedule_run(
        TEACHER, SyntheticTask(vocab=8, seq=8, seed=1, train_size=64,
                               val_size=8, test_size=8),
        "ce", 0.3, 10, levels=(0.5, 0.75, 0.9), epochs=4,
        epochs_per_level=0, restart=True, lr=0.05, lam=1.0, batch_size=32)
    assert student.prunable_sparsity() == pytest.approx(0.3, abs=0.01)


def test_bad_prune_mode_rejected():
    with pytest.raises(ValueError, match="prune_mode"):
        experiment.run_recovery_experiment(
            sparsities=(0.5,), variants=("ce",), seeds=(10,),
            task=TASK, teacher=TEACHER, prune_mode="banana")


def test_lr_window_slices_one_schedule():
    # Two windowed runs must reproduce the lr curve of one long schedule.
    task = SyntheticTask(vocab=8, seq=8, seed=3, train_size=64,
                         val_size=8, test_size=8)
    cfg = TinyModelConfig(vocab=8, seq=8, d_model=16, blocks=1)
    steps_per_epoch = 2  # 64 samples / 32 batch
    epochs = 4
    half = epochs * steps_per_epoch
    whole = 2 * half

    m1 = TinyModel.init(cfg, rng(0))
    r1 = training.train(m1, task, "ce", epochs=epochs, lr=0.1, seed=5,
                        lr_window=(0, whole))
    r2 = training.train(m1, task, "ce", epochs=epochs, lr=0.1, seed=6,
                        lr_window=(half, whole))
    got = [row["lr"] for row in r1.steps] + [row["lr"] for row in r2.steps]
    warmup_steps = int(round(0.1 * whole))
    want = [training.lr_at(k, whole, 0.1, warmup_steps) for k in range(whole)]
    assert got == pytest.approx(want)


def test_lr_window_validation():
    task = SyntheticTask(vocab=8, seq=8, seed=3, train_size=64,
                         val_size=8, test_size=8)
    cfg = TinyModelConfig(vocab=8, seq=8, d_model=16, blocks=1)
    m = TinyModel.init(cfg, rng(0))
    with pytest.raises(ValueError, match="lr_window"):
        training.train(m, task, "ce", epochs=4, lr=0.1, seed=5,
                       lr_window=(0, 3))
    with pytest.raises(ValueError, match="lr_window"):
        training.train(m, task, "ce", epochs=4, lr=0.1, seed=5,
                       lr_window=(-1, 100))
