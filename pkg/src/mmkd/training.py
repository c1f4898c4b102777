"""Two-stage training: teacher with cross-entropy, then distillation.

Stage one trains the fusion block and heads of the teacher on top of frozen
pretrained encoders with per-sample modality dropout. Stage two freezes the
whole teacher and trains the full student (encoders included) on a mix of
cross-entropy and KL to the teacher's per-head class distributions; in every
step the teacher scores exactly the retained-modality sets the student sees.
Baseline variants reuse the same engine with the enhancement toggles off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor, cross_entropy, log_softmax, softmax, sum_
from .model import MultimodalClassifier, accuracy, batched_predictions, collate, raw_shapes
from .optim import AdamW, clip_grad_norm
from .rng import RngStream
from .synthdata import MultimodalSequence

# init-stream role tags, so every model role draws independent parameters
TEACHER_ROLE = 1
STUDENT_ROLE = 2
BASELINE_PLAIN_ROLE = 3
BASELINE_ENHANCED_ROLE = 4

# "data"/"dropout" stream path namespace for training loops (dataset
# generation owns 0..3, encoder pretraining owns 20+)
_TRAIN_PATH = 10
_ATTN_PATH = 11


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from base to peak, then cosine decay back to base."""

    base_lr: float = 1e-5
    peak_lr: float = 5e-4
    warmup_epochs: float = 10.0
    total_epochs: float = 40.0


def lr_at(epoch_fraction: float, schedule: Schedule) -> float:
    """Learning rate at a fractional epoch position in [0, total_epochs]."""
    t = float(epoch_fraction)
    s = schedule
    if t <= 0.0:
        return s.base_lr
    if t < s.warmup_epochs:
        return s.base_lr + (s.peak_lr - s.base_lr) * t / s.warmup_epochs
    span = max(s.total_epochs - s.warmup_epochs, 1e-12)
    progress = min((t - s.warmup_epochs) / span, 1.0)
    return s.base_lr + (s.peak_lr - s.base_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class TrainPlan:
    """Hyperparameters for one training stage."""

    stage: str  # "teacher" or "distill"
    epochs: int = 40
    batch_size: int = 32
    modality_dropout_p: float = 0.5
    alpha: float = 0.7
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0

    def validate(self) -> None:
        if self.stage not in ("teacher", "distill"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.modality_dropout_p < 1.0:
            raise ValueError("modality_dropout_p must be in [0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")

    @classmethod
    def teacher_default(cls, seed: int = 0, **overrides) -> "TrainPlan":
        base = dict(stage="teacher", weight_decay=0.05, clip_norm=1.0, seed=seed)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def distill_default(cls, seed: int = 0, **overrides) -> "TrainPlan":
        base = dict(stage="distill", weight_decay=0.01, clip_norm=2.0, seed=seed)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = asdict(self.schedule)
        return d


# ---------------------------------------------------------------------------
# core operations


def modality_dropout(available: frozenset[int] | set[int], p: float,
                     rng: np.random.Generator) -> frozenset[int]:
    """Drop each available modality independently with probability p.

    A draw that would empty the set is rejected and redrawn, so at least one
    modality always survives. Modalities absent from the sample are never
    reintroduced.
    """
    if not available:
        raise ValueError("modality_dropout requires a nonempty available set")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    mods = sorted(available)
    if p == 0.0 or len(mods) == 1:
        return frozenset(mods)
    while True:
        keep = [m for m in mods if rng.random() >= p]
        if keep:
            return frozenset(keep)


def ce_loss(labels: np.ndarray, logits: list[Tensor]) -> Tensor:
    """Batch-mean softmax cross-entropy, averaged over label heads."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 2 or labels.shape[1] != len(logits):
        raise ValueError(f"labels shape {labels.shape} does not match {len(logits)} heads")
    total = cross_entropy(logits[0], labels[:, 0])
    for h in range(1, len(logits)):
        total = total + cross_entropy(logits[h], labels[:, h])
    return total * (1.0 / len(logits))


def kl_loss(teacher_logits: list[Tensor], student_logits: list[Tensor]) -> Tensor:
    """Batch-mean KL(teacher || student) over softmax distributions, head-averaged.

    Gradients reach the student only when the teacher side carries no grad
    requirement (the frozen-teacher contract).
    """
    if len(teacher_logits) != len(student_logits):
        raise ValueError("teacher and student head counts differ")
    total = None
    for t, s in zip(teacher_logits, student_logits):
        t = t if isinstance(t, Tensor) else Tensor(t)
        s = s if isinstance(s, Tensor) else Tensor(s)
        if t.shape != s.shape:
            raise ValueError(f"logit shape mismatch: {t.shape} vs {s.shape}")
        p_t = softmax(t, axis=-1)
        term = sum_(p_t * (log_softmax(t, axis=-1) - log_softmax(s, axis=-1)), axis=-1)
        term = term.mean()
        total = term if total is None else total + term
    return total * (1.0 / len(teacher_logits))


def student_loss(ce, kl, alpha: float):
    """Mixing objective: alpha * ce + (1 - alpha) * kl."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    return alpha * ce + (1.0 - alpha) * kl


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    metrics: list[dict]  # one row per epoch
    summary: dict

    @property
    def final_action_acc(self) -> float:
        return self.metrics[-1]["val_action_acc"]


def metric_columns(num_heads: int) -> list[str]:
    cols = ["epoch", "lr", "train_loss"]
    cols += [f"val_acc_head_{h}" for h in range(num_heads)]
    cols += ["val_action_acc"]
    return cols


def _epoch_retained(
    samples: list[MultimodalSequence], p: float, use_dropout: bool,
    rng: np.random.Generator, num_modalities: int,
) -> np.ndarray:
    """(N, M) bool mask of retained modalities for one epoch."""
    mask = np.zeros((len(samples), num_modalities), dtype=bool)
    for i, s in enumerate(samples):
        keep = modality_dropout(s.availability, p, rng) if use_dropout else s.availability
        for m in keep:
            mask[i, m] = True
    return mask


def _check_finite(loss_value: float, stage: str, epoch: int, step: int) -> None:
    if not math.isfinite(loss_value):
        raise DivergenceError(
            f"{stage} loss became non-finite ({loss_value}) at epoch {epoch} step {step}"
        )


def _val_metrics(model, samples, cached, batch_size) -> tuple[tuple[float, ...], float]:
    pred, truth = batched_predictions(model, samples, batch_size, cached=cached)
    return accuracy(pred, truth)


def train_teacher(
    plan: TrainPlan,
    train_samples: list[MultimodalSequence],
    val_samples: list[MultimodalSequence],
    model: MultimodalClassifier,
) -> TrainResult:
    """Stage one: optimize the fusion block and heads over frozen encoders."""
    plan.validate()
    if plan.stage != "teacher":
        raise ValueError("train_teacher requires a teacher-stage plan")
    if any(enc.trainable for enc in model.encoders):
        raise ValueError("teacher encoders must be frozen before training")

    cached_train = model.cache_encodings(train_samples)
    cached_val = model.cache_encodings(val_samples)
    labels = np.asarray([s.label for s in train_samples], dtype=np.int64)

    def forward(idx, present, attn_rng):
        batch_cache = [c[idx] for c in cached_train]
        logits = model.logits_from_cached(batch_cache, present, train=True, dropout_rng=attn_rng)
        return ce_loss(labels[idx], logits)

    return _run_loop(plan, model, train_samples, forward,
                     lambda: _val_metrics(model, val_samples, cached_val, 256))


def freeze_model(model: MultimodalClassifier) -> None:
    """Clear every gradient requirement; the model becomes forward-only."""
    for enc in model.encoders:
        enc.freeze()
    for p in model.parameters().values():
        p.requires_grad = False


def distill_student(
    plan: TrainPlan,
    train_samples: list[MultimodalSequence],
    val_samples: list[MultimodalSequence],
    teacher: MultimodalClassifier,
    student: MultimodalClassifier,
) -> TrainResult:
    """Stage two: train the full student against labels and the frozen teacher."""
    plan.validate()
    if plan.stage != "distill":
        raise ValueError("distill_student requires a distill-stage plan")
    freeze_model(teacher)
    return train_student_variant(
        plan, train_samples, val_samples, student,
        teacher=teacher, use_modality_dropout=True,
    )


def train_student_variant(
    plan: TrainPlan,
    train_samples: list[MultimodalSequence],
    val_samples: list[MultimodalSequence],
    student: MultimodalClassifier,
    teacher: MultimodalClassifier | None = None,
    use_modality_dropout: bool = True,
) -> TrainResult:
    """Shared engine for the student and its ablation ladder.

    With `teacher` set the objective is the alpha mix; without it the loss is
    plain cross-entropy. Turning off `use_modality_dropout` trains on each
    sample's stored availability.
    """
    plan.validate()
    shapes = raw_shapes(student.encoders)
    streams_all, _, labels = collate(train_samples, shapes)
    teacher_cache = teacher.cache_encodings(train_samples) if teacher is not None else None
    # teacher outputs are deterministic per (sample, retained set); memoize
    # them so repeated patterns across epochs skip the forward pass
    logit_memo: dict[tuple[int, int], tuple[np.ndarray, ...]] = {}
    mask_bits = 1 << np.arange(student.num_modalities)

    def teacher_logits_for(idx, present):
        keys = [(int(i), int(b)) for i, b in zip(idx, (present * mask_bits).sum(axis=1))]
        missing = [j for j, key in enumerate(keys) if key not in logit_memo]
        if missing:
            rows = idx[missing]
            logits = teacher.logits_from_cached(
                [c[rows] for c in teacher_cache], present[missing])
            for pos, j in enumerate(missing):
                logit_memo[keys[j]] = tuple(lg.data[pos] for lg in logits)
        return [
            Tensor(np.stack([logit_memo[key][h] for key in keys]))
            for h in range(len(student.head_classes))
        ]

    def forward(idx, present, attn_rng):
        batch_streams = [s[idx] for s in streams_all]
        logits = student.logits_from_raw(batch_streams, present, train=True, dropout_rng=attn_rng)
        ce = ce_loss(labels[idx], logits)
        if teacher is None:
            return ce
        return student_loss(ce, kl_loss(teacher_logits_for(idx, present), logits), plan.alpha)

    return _run_loop(plan, student, train_samples, forward,
                     lambda: _val_metrics(student, val_samples, None, 256),
                     use_modality_dropout=use_modality_dropout)


def _run_loop(plan, model, train_samples, forward, val_fn,
              use_modality_dropout: bool = True) -> TrainResult:
    n = len(train_samples)
    num_modalities = model.num_modalities
    opt = AdamW(model.trainable_parameters(), weight_decay=plan.weight_decay)
    params = opt.params
    steps_per_epoch = max(1, math.ceil(n / plan.batch_size))
    empty_retained = 0
    clip_events = 0
    rows = []

    for epoch in range(plan.epochs):
        order = RngStream(plan.seed, "data", (_TRAIN_PATH, epoch)).generator().permutation(n)
        drop_rng = RngStream(plan.seed, "dropout", (_TRAIN_PATH, epoch)).generator()
        attn_rng = RngStream(plan.seed, "dropout", (_ATTN_PATH, epoch)).generator()
        retained = _epoch_retained(
            train_samples, plan.modality_dropout_p, use_modality_dropout,
            drop_rng, num_modalities,
        )
        empty_retained += int((~retained.any(axis=1)).sum())

        loss_sum = 0.0
        lr = plan.schedule.base_lr
        for step in range(steps_per_epoch):
            idx = order[step * plan.batch_size:(step + 1) * plan.batch_size]
            loss = forward(idx, retained[idx], attn_rng)
            value = loss.item()
            _check_finite(value, plan.stage, epoch, step)
            loss_sum += value * idx.size
            opt.zero_grad()
            loss.backward()
            norm = clip_grad_norm(params, plan.clip_norm)
            if norm > plan.clip_norm:
                clip_events += 1
            lr = lr_at(epoch + step / steps_per_epoch, plan.schedule)
            opt.step(lr)

        head_acc, action_acc = val_fn()
        row = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / n}
        for h, a in enumerate(head_acc):
            row[f"val_acc_head_{h}"] = a
        row["val_action_acc"] = action_acc
        rows.append(row)

    summary = {
        "stage": plan.stage,
        "epochs": plan.epochs,
        "steps": plan.epochs * steps_per_epoch,
        "empty_retained_steps": empty_retained,
        "clip_events": clip_events,
        "final_train_loss": rows[-1]["train_loss"],
        "final_val_action_acc": rows[-1]["val_action_acc"],
        "plan": plan.to_dict(),
    }
    return TrainResult(metrics=rows, summary=summary)
