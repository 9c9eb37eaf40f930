"""Loss zoo for sparse fine-tuning: task CE, logit KD, feature KD, entropy.

Every loss takes logits or feature maps of shape (B, seq, ...) together
with a TokenBatch carrying targets and a padding mask, reduces only over
non-padding positions, and returns a float plus the exact gradient with
respect to the student tensor. Semantics:

- task_loss: mean over non-padding tokens of -log softmax(logits)[target].
- logit_kd_loss: mean over non-padding tokens of the full per-token KL
  divergence KL(p_teacher || p_student) summed over the vocabulary.
- squarehead_layer_loss: MSE(f_t, f_s) / MSE(f_t, 0), both means taken
  over non-padding positions only. The position count cancels, so this is
  sum((f_t - f_s)^2) / sum(f_t^2) over surviving positions, which also
  makes the loss exactly invariant to a common rescaling of both maps.
- the total feature loss is the plain unweighted sum over model blocks.

Reductions run in float64 regardless of input dtype and gradients are cast
back to the input dtype, so float64 inputs give gradients that survive
tight finite-difference checks while the fp32 training path stays cheap.
Teacher tensors are constants: no gradient is ever produced for them.
"""

from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("ce", "standard_kd", "squarehead")

LOSS_CSV_HEADER = "step,variant,task,logit_kd,feat_total,total,entropy"


@dataclass
class TokenBatch:
    targets: np.ndarray  # (B, seq) int token ids
    padding: np.ndarray  # (B, seq) bool, True at padding positions

    def __post_init__(self):
        self.targets = np.asarray(self.targets)
        self.padding = np.asarray(self.padding, dtype=bool)
        if self.targets.shape != self.padding.shape or self.targets.ndim != 2:
            raise ValueError(
                f"targets {self.targets.shape} and padding {self.padding.shape} "
                "must be matching (B, seq) arrays"
            )
        if not (~self.padding).any():
            raise ValueError("batch is entirely padding")

    @property
    def token_count(self):
        return int((~self.padding).sum())


def _check_logits(logits, batch, name="logits"):
    logits = np.asarray(logits)
    if logits.ndim != 3 or logits.shape[:2] != batch.targets.shape:
        raise ValueError(f"{name} shape {logits.shape} does not match batch {batch.targets.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError(f"non-finite {name}")
    return logits


def _log_softmax64(logits):
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def task_loss(student_logits, batch):
    """Masked cross entropy against batch targets. Returns (loss, grad)."""
    logits = _check_logits(student_logits, batch, "student logits")
    vocab = logits.shape[2]
    if int(batch.targets.max()) >= vocab or int(batch.targets.min()) < 0:
        raise ValueError("target id out of vocabulary range")
    live = ~batch.padding
    count = batch.token_count
    logp = _log_softmax64(logits)
    b_idx, s_idx = np.nonzero(live)
    picked = logp[b_idx, s_idx, batch.targets[b_idx, s_idx]]
    loss = -picked.sum() / count
    p = np.exp(logp)
    grad = np.zeros_like(p)
    grad[live] = p[live]
    grad[b_idx, s_idx, batch.targets[b_idx, s_idx]] -= 1.0
    grad /= count
    return float(loss), grad.astype(logits.dtype)


def logit_kd_loss(teacher_logits, student_logits, batch, temperature=1.0):
    """Masked mean per-token KL(teacher || student) over the vocabulary.

    The temperature hook softens both distributions (logits / T) and is 1.0
    by default; gradients include the 1/T factor.
    """
    t = _check_logits(teacher_logits, batch, "teacher logits")
    s = _check_logits(student_logits, batch, "student logits")
    if t.shape != s.shape:
        raise ValueError(f"teacher {t.shape} and student {s.shape} logits differ")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    inv_t = 1.0 / float(temperature)
    logp_t = _log_softmax64(t * inv_t)
    logp_s = _log_softmax64(s * inv_t)
    p_t = np.exp(logp_t)
    live = ~batch.padding
    count = batch.token_count
    kl_per_token = (p_t * (logp_t - logp_s)).sum(axis=-1)
    loss = kl_per_token[live].sum() / count
    grad = np.zeros_like(p_t)
    grad[live] = (np.exp(logp_s) - p_t)[live] * (inv_t / count)
    return float(loss), grad.astype(s.dtype)


def squarehead_layer_loss(f_t, f_s, batch, eps=1e-12):
    """Normalized feature MSE for one model block. Returns (loss, grad wrt f_s)."""
    f_t = np.asarray(f_t)
    f_s = np.asarray(f_s)
    if f_t.shape != f_s.shape or f_t.ndim != 3:
        raise ValueError(f"feature shapes differ: {f_t.shape} vs {f_s.shape}")
    if f_t.shape[:2] != batch.targets.shape:
        raise ValueError(f"features {f_t.shape} do not match batch {batch.targets.shape}")
    live = ~batch.padding
    t64 = f_t.astype(np.float64)[live]
    s64 = f_s.astype(np.float64)[live]
    n_elems = t64.size
    denom_mse = (t64 * t64).sum() / n_elems
    if denom_mse < eps:
        raise ValueError("teacher features are numerically zero over non-padding tokens")
    denom = denom_mse * n_elems  # = sum(f_t^2)
    diff = s64 - t64
    loss = (diff * diff).sum() / denom
    grad = np.zeros(f_s.shape, dtype=np.float64)
    grad[live] = 2.0 * diff / denom
    return float(loss), grad.astype(f_s.dtype)


def squarehead_total(per_layer):
    """Plain sum of per-block feature losses, no per-layer weights."""
    per_layer = list(per_layer)
    if not per_layer:
        raise ValueError("no per-layer losses to sum")
    return float(np.sum(np.asarray(per_layer, dtype=np.float64)))


def predictive_entropy(student_logits, batch):
    """Mean Shannon entropy (nats) of the per-token predictive distribution."""
    logits = _check_logits(student_logits, batch, "student logits")
    live = ~batch.padding
    logp = _log_softmax64(logits)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1)
    return float(h[live].sum() / batch.token_count)


@dataclass
class LossBreakdown:
    variant: str
    task: float
    logit_kd: float
    feat_per_layer: list
    feat_total: float
    total: float
    grad_logits: np.ndarray
    grad_features: list = field(default_factory=list)

    def csv_row(self, step, entropy=float("nan")):
        return (
            f"{step},{self.variant},{self.task:.8g},{self.logit_kd:.8g},"
            f"{self.feat_total:.8g},{self.total:.8g},{entropy:.8g}"
        )


def combined_loss(
    variant,
    student_logits,
    batch,
    teacher_logits=None,
    teacher_features=None,
    student_features=None,
    lam=1.0,
    temperature=1.0,
):
    """Assemble the selected training loss and its gradients by linearity.

    ce: L_task. standard_kd: L_task + lam * L_logit. squarehead: L_task +
    lam * sum of per-block normalized feature MSEs.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}, expected one of {VARIANTS}")
    task, grad_logits = task_loss(student_logits, batch)
    logit_kd = 0.0
    feat_per_layer = []
    feat_total = 0.0
    grad_features = []
    if variant == "standard_kd":
        if teacher_logits is None:
            raise ValueError("standard_kd needs teacher logits")
        logit_kd, g_kd = logit_kd_loss(teacher_logits, student_logits, batch, temperature)
        grad_logits = grad_logits + np.asarray(g_kd) * grad_logits.dtype.type(lam)
        total = task + lam * logit_kd
    elif variant == "squarehead":
        if teacher_features is None or student_features is None:
            raise ValueError("squarehead needs teacher and student feature maps")
        if len(teacher_features) != len(student_features):
            raise ValueError("teacher and student expose different block counts")
        for f_t, f_s in zip(teacher_features, student_features):
            l_layer, g_layer = squarehead_layer_loss(f_t, f_s, batch)
            feat_per_layer.append(l_layer)
            grad_features.append(np.asarray(g_layer) * np.asarray(g_layer).dtype.type(lam))
        feat_total = squarehead_total(feat_per_layer)
        total = task + lam * feat_total
    else:
        total = task
    return LossBreakdown(
        variant=variant,
        task=task,
        logit_kd=logit_kd,
        feat_per_layer=feat_per_layer,
        feat_total=feat_total,
        total=total,
        grad_logits=grad_logits,
        grad_features=grad_features,
    )
