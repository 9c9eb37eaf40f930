"""SGD fine-tuning loop with warmup, linear decay, and divergence watch.

The trainer is plain SGD (optional weight decay, no momentum) so the loss
variants stay the only moving part. The learning rate ramps linearly from
zero over the warmup steps, then decays linearly to zero at the end of
training. Masked parameters have their gradients frozen every step, which
keeps pruned weights exactly zero for the whole run.

Divergence policy: a per-step watch flags the first step whose loss
exceeds 10x the running median of the previous 20 steps, or is not
finite. A non-finite loss also halts the run (the flag is recorded, no
exception); a finite spike only flags.
"""

from dataclasses import dataclass, field

import numpy as np

from . import distill
from .tensor import rng

DIVERGENCE_WINDOW = 20
DIVERGENCE_FACTOR = 10.0


def lr_at(step, total_steps, base_lr, warmup_steps):
    """Linear warmup to base_lr, then linear decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    remaining = max(1, total_steps - warmup_steps)
    return base_lr * max(0.0, (total_steps - step) / remaining)


def detect_divergence(history):
    """First step whose loss spikes above 10x the trailing median, or is non-finite.

    Returns (flag, step); step is None when nothing is flagged.
    """
    history = np.asarray(history, dtype=np.float64)
    if len(history) < DIVERGENCE_WINDOW:
        raise ValueError(f"need at least {DIVERGENCE_WINDOW} steps of history")
    for k in range(len(history)):
        if not np.isfinite(history[k]):
            return True, k
        if k >= DIVERGENCE_WINDOW:
            med = float(np.median(history[k - DIVERGENCE_WINDOW : k]))
            if history[k] > DIVERGENCE_FACTOR * med:
                return True, k
    return False, None


def _spikes(loss, k, history):
    if not np.isfinite(loss):
        return True
    if k >= DIVERGENCE_WINDOW:
        med = float(np.median(history[k - DIVERGENCE_WINDOW : k]))
        return loss > DIVERGENCE_FACTOR * med
    return False


@dataclass
class TrainRun:
    variant: str
    seed: int
    sparsity: float
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    diverged: bool = False
    diverged_step: int = None

    @property
    def losses(self):
        return [row["total"] for row in self.steps]

    def step_csv(self):
        lines = [distill.LOSS_CSV_HEADER]
        for row in self.steps:
            lines.append(
                f"{row['step']},{self.variant},{row['task']:.8g},{row['logit_kd']:.8g},"
                f"{row['feat_total']:.8g},{row['total']:.8g},{row['entropy']:.8g}"
            )
        return "\n".join(lines) + "\n"

    def summary(self):
        return {
            "variant": self.variant,
            "seed": self.seed,
            "sparsity": self.sparsity,
            "steps": len(self.steps),
            "diverged": self.diverged,
            "diverged_step": self.diverged_step,
            "final_loss": self.steps[-1]["total"] if self.steps else None,
            "epochs": self.epochs,
        }


def evaluate(model, inputs, batch):
    """(accuracy over non-padding tokens, mean predictive entropy in nats)."""
    logits, _, _ = model.forward(inputs)
    live = ~batch.padding
    pred = logits.argmax(axis=-1)
    accuracy = float((pred[live] == batch.targets[live]).mean())
    entropy = distill.predictive_entropy(logits, batch)
    return accuracy, entropy


def train(
    model,
    task,
    variant,
    epochs,
    lr,
    seed,
    teacher=None,
    lam=1.0,
    batch_size=32,
    warmup_frac=0.1,
    weight_decay=0.0,
    split="train",
    eval_split="val",
    lr_window=None,
):
    """Fine-tune the model in place; returns the recorded TrainRun.

    lr_window, when given as (offset_steps, total_steps), makes this run
    use the slice [offset, offset + own steps) of a longer warmup-decay
    schedule instead of a fresh one; gradual pruning without per-level
    restarts threads one schedule through several calls this way.
    """
    if variant not in distill.VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant != "ce" and teacher is None:
        raise ValueError(f"variant {variant!r} needs a teacher")
    gen = rng(seed)
    n = task.size(split)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    total_steps = epochs * steps_per_epoch
    sched_offset = 0
    if lr_window is not None:
        sched_offset, window_total = lr_window
        if sched_offset < 0 or window_total < sched_offset + total_steps:
            raise ValueError(
                f"lr_window {lr_window} cannot hold {total_steps} steps")
        total_steps = window_total
    warmup_steps = int(round(warmup_frac * total_steps))
    run = TrainRun(variant=variant, seed=seed, sparsity=model.prunable_sparsity())
    losses = []
    step = 0
    halted = False
    for epoch in range(epochs):
        if halted:
            break
        for inputs, batch in task.iter_batches(split, batch_size, gen):
            s_logits, s_feats, cache = model.forward(inputs)
            if not np.all(np.isfinite(s_logits)):
                # Blown-up weights surface here before any loss exists; treat
                # it as the divergence it is rather than raising.
                nanv = float("nan")
                run.steps.append(
                    {
                        "step": step,
                        "task": nanv,
                        "logit_kd": nanv,
                        "feat_total": nanv,
                        "total": nanv,
                        "entropy": nanv,
                        "lr": lr_at(step + sched_offset, total_steps, lr, warmup_steps),
                    }
                )
                if not run.diverged:
                    run.diverged = True
                    run.diverged_step = step
                halted = True
                break
            t_logits = t_feats = None
            if teacher is not None:
                t_logits, t_feats, _ = teacher.forward(inputs)
            br = distill.combined_loss(
                variant,
                s_logits,
                batch,
                teacher_logits=t_logits if variant == "standard_kd" else None,
                teacher_features=t_feats if variant == "squarehead" else None,
                student_features=s_feats if variant == "squarehead" else None,
                lam=lam,
            )
            entropy = distill.predictive_entropy(s_logits, batch)
            run.steps.append(
                {
                    "step": step,
                    "task": br.task,
                    "logit_kd": br.logit_kd,
                    "feat_total": br.feat_total,
                    "total": br.total,
                    "entropy": entropy,
                    "lr": lr_at(step + sched_offset, total_steps, lr, warmup_steps),
                }
            )
            losses.append(br.total)
            if not run.diverged and _spikes(br.total, step, losses):
                run.diverged = True
                run.diverged_step = step
            if not np.isfinite(br.total):
                halted = True
                break
            grads = model.backward(cache, br.grad_logits, br.grad_features or None)
            eta = np.float32(lr_at(step + sched_offset, total_steps, lr, warmup_steps))
            wd = np.float32(weight_decay)
            for name, g in grads.items():
                w = model.params[name]
                if weight_decay:
                    g = g + wd * w
                w -= eta * g.astype(w.dtype)
                if name in model.masks:
                    w[~model.masks[name]] = 0
            step += 1
        if not halted:
            try:
                acc, ent = evaluate(model, *task.split(eval_split))
            except ValueError:
                # Weights overflowed on the last step of the epoch; the next
                # step's forward guard will halt the run.
                acc, ent = float("nan"), float("nan")
            run.epochs.append({"epoch": epoch, "accuracy": acc, "entropy": ent})
    return run
