"""Fine-tuning loop: SGD over sparse update plans, metrics, evaluation.

Gradients come back from the engine packed over selected channels, and the
optimizer applies them to the matching kernel slices, so update cost scales
with the plan, not the model. Batches are processed one sample at a time and
averaged; that keeps the live activation footprint at the single-sample
figure the planner charged for.

Update modes:
  * none     evaluate only, no parameters move
  * last     classifier only
  * full     every layer, all channels
  * fixed    budgeted suffix plan, frozen for the whole run
  * dynamic  budgeted suffix plan with staged random channel redraws

Metric rows carry no timestamps; two runs from the same seed produce
byte-identical CSV files.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import save_model
from .engine import DEFAULT_BLOCK_PRUNE, BlockPruneConfig, ParamGrads, backward, forward
from .errors import ConfigError, DatasetError
from .graph import ModelGraph
from .planner import (
    DEFAULT_MEMORY_MODEL,
    MemoryModel,
    ScheduleConfig,
    ScheduleState,
    UpdatePlan,
    classifier_plan,
    footprint_report,
    full_plan,
    gradient_sum_reallocate,
    schedule_step,
)
from .seeding import substream

__all__ = [
    "MODES",
    "TrainConfig",
    "MetricsRow",
    "METRICS_HEADER",
    "metrics_csv_lines",
    "write_metrics_csv",
    "read_metrics_csv",
    "lr_at",
    "sgd_step",
    "evaluate",
    "TrainResult",
    "fine_tune",
]

MODES = ("none", "last", "full", "fixed", "dynamic")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr_max: float = 0.1
    warmup_epochs: int = 5
    momentum: float = 0.0
    batch_size: int = 8
    mode: str = "dynamic"
    budget_bytes: int = 262144
    ratio: float = 0.2
    fixed_head_epochs: int | None = None  # None: 20% of epochs, rounded
    dynamic_epochs: int | None = None
    fixed_tail_epochs: int | None = None
    reselect_every_steps: int | None = None  # None: once per epoch
    realloc_every_epochs: int = 0  # 0: gradient-sum reallocation off
    seed: int = 0
    act_prune: BlockPruneConfig = DEFAULT_BLOCK_PRUNE
    memory: MemoryModel = DEFAULT_MEMORY_MODEL

    def stages(self) -> tuple[int, int, int]:
        """Epoch counts (head, dynamic, tail); must sum to epochs."""
        if self.mode == "fixed":
            return self.epochs, 0, 0
        head, dyn, tail = self.fixed_head_epochs, self.dynamic_epochs, self.fixed_tail_epochs
        if head is None and dyn is None and tail is None:
            head = max(0, round(0.2 * self.epochs))
            tail = max(0, round(0.2 * self.epochs))
            return head, self.epochs - head - tail, tail
        head = 0 if head is None else head
        tail = 0 if tail is None else tail
        dyn = self.epochs - head - tail if dyn is None else dyn
        return head, dyn, tail

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs <= 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr_max <= 0:
            raise ConfigError(f"lr_max must be positive, got {self.lr_max}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be non-negative, got {self.warmup_epochs}")
        if self.reselect_every_steps is not None and self.reselect_every_steps <= 0:
            raise ConfigError("reselect_every_steps must be positive when given")
        if self.realloc_every_epochs < 0:
            raise ConfigError("realloc_every_epochs must be non-negative")
        if self.mode == "dynamic":
            head, dyn, tail = self.stages()
            if min(head, dyn, tail) < 0 or head + dyn + tail != self.epochs:
                raise ConfigError(
                    f"stage epochs ({head}, {dyn}, {tail}) must be non-negative and sum to {self.epochs}"
                )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine decay over the remainder."""
    if epoch < 0 or epoch >= cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr_max * (epoch + 1) / w
    span = cfg.epochs - w
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / span))


# --------------------------------------------------------------------------
# metrics


METRICS_HEADER = "epoch,split,loss,accuracy,lr,plan_id,extra_bytes"


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float
    plan_id: int
    extra_bytes: int


def metrics_csv_lines(rows: list[MetricsRow]) -> list[str]:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(f"{r.epoch},{r.split},{r.loss!r},{r.accuracy!r},{r.lr!r},{r.plan_id},{r.extra_bytes}")
    return lines


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(metrics_csv_lines(rows)) + "\n")


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise ConfigError(f"{path}: unexpected metrics header {header!r}")
        for line in fh:
            e, split, loss, acc, lr, pid, extra = line.strip().split(",")
            rows.append(MetricsRow(int(e), split, float(loss), float(acc), float(lr), int(pid), int(extra)))
    return rows


# --------------------------------------------------------------------------
# optimizer


def sgd_step(
    model: ModelGraph,
    grads: dict[int, ParamGrads],
    lr: float,
    momentum: float = 0.0,
    velocity: dict | None = None,
) -> None:
    """Apply packed gradients to the matching parameter slices, in place.

    Velocity buffers exist only when momentum is nonzero; they are allocated
    lazily per parameter at full shape and advanced on the selected slices.
    """
    for nid, g in grads.items():
        node = model.node(nid)
        sel = g.selected
        if momentum > 0.0:
            assert velocity is not None
            kw = velocity.setdefault((nid, "w"), np.zeros_like(node.kernel))
            kb = velocity.setdefault((nid, "b"), np.zeros_like(node.bias))
            vw = momentum * _slice_last(kw, node.kind, sel) + g.grad_w
            _assign_last(kw, node.kind, sel, vw)
            kb[sel] = momentum * kb[sel] + g.grad_b
            step_w, step_b = vw, kb[sel]
        else:
            step_w, step_b = g.grad_w, g.grad_b
        if node.kind == "conv":
            node.kernel[:, :, :, sel] -= lr * step_w
        elif node.kind == "dwconv":
            node.kernel[:, :, sel] -= lr * step_w
        else:  # linear
            node.kernel[:, sel] -= lr * step_w
        node.bias[sel] -= lr * step_b


def _slice_last(arr: np.ndarray, kind: str, sel: np.ndarray) -> np.ndarray:
    if kind == "conv":
        return arr[:, :, :, sel]
    if kind == "dwconv":
        return arr[:, :, sel]
    return arr[:, sel]


def _assign_last(arr: np.ndarray, kind: str, sel: np.ndarray, value: np.ndarray) -> None:
    if kind == "conv":
        arr[:, :, :, sel] = value
    elif kind == "dwconv":
        arr[:, :, sel] = value
    else:
        arr[:, sel] = value


# --------------------------------------------------------------------------
# evaluation


def _batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, int]:
    """(summed loss, correct count) for a batch of logits."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(len(labels)), labels].sum()
    correct = int((logits.argmax(axis=1) == labels).sum())
    return float(loss), correct


def evaluate(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 64,
    act_prune: BlockPruneConfig = DEFAULT_BLOCK_PRUNE,
) -> tuple[float, float]:
    """Mean loss and accuracy. Block activation pruning stays on; the
    deployed network is the pruned one, so evaluation matches it."""
    total_loss, total_correct = 0.0, 0
    n = len(labels)
    if n == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    for lo in range(0, n, batch_size):
        logits, _ = forward(model, images[lo : lo + batch_size], plan=None, act_prune=act_prune)
        loss, correct = _batch_cross_entropy(logits, labels[lo : lo + batch_size])
        total_loss += loss
        total_correct += correct
    return total_loss / n, total_correct / n


# --------------------------------------------------------------------------
# fine-tuning


@dataclass
class TrainResult:
    model: ModelGraph
    rows: list[MetricsRow]
    final_plan: UpdatePlan | None
    peak_tracked_bytes: int
    footprint_bytes: int
    wall_time_s: float


def _build_plan(model: ModelGraph, cfg: TrainConfig, ticks: tuple[int, int, int]):
    """Initial plan plus (for budgeted modes) the redraw schedule state."""
    if cfg.mode == "none":
        return None, None
    if cfg.mode == "last":
        return classifier_plan(model), None
    if cfg.mode == "full":
        return full_plan(model), None
    head, dyn, tail = ticks
    sched = ScheduleConfig(head, dyn, tail, cfg.ratio, cfg.budget_bytes, cfg.seed)
    state = ScheduleState.from_selection(model, sched, cfg.memory)
    return state.plan_current, state


def fine_tune(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    val_images: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
    metrics_path=None,
    checkpoint_every: int = 0,
    checkpoint_path=None,
) -> TrainResult:
    """Train a copy of the model under the configured update mode.

    Plans change only at reselection ticks (epoch starts by default), so the
    channel selection is constant within a batch. The gradient-sum ablation,
    when enabled, replaces the plan at realloc boundaries using L1 gradient
    sums accumulated over the preceding epoch. Mode none evaluates once and
    returns the model untouched. With checkpoint_every > 0, the model is
    saved to checkpoint_path suffixed with the epoch number.
    """
    cfg.validate()
    started = time.perf_counter()
    model = model.copy()
    n = len(labels)
    if n == 0:
        raise ConfigError("training split is empty")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise DatasetError(
            f"labels span [{labels.min()}, {labels.max()}], model has {model.num_classes} classes"
        )
    if checkpoint_every > 0 and checkpoint_path is None:
        raise ConfigError("checkpoint_every needs a checkpoint_path")

    if cfg.mode == "none":
        use_val = val_images is not None and val_labels is not None
        loss, acc = evaluate(
            model,
            val_images if use_val else images,
            val_labels if use_val else labels,
            act_prune=cfg.act_prune,
        )
        rows = [MetricsRow(0, "val" if use_val else "train", loss, acc, 0.0, 0, 0)]
        if metrics_path is not None:
            write_metrics_csv(metrics_path, rows)
        return TrainResult(model, rows, None, 0, 0, time.perf_counter() - started)

    steps_per_epoch = math.ceil(n / cfg.batch_size)
    reselect_every = cfg.reselect_every_steps or steps_per_epoch
    ticks_at = [
        e * steps_per_epoch + s
        for e in range(cfg.epochs)
        for s in range(steps_per_epoch)
        if (e * steps_per_epoch + s) % reselect_every == 0
    ]
    head_e, dyn_e, tail_e = cfg.stages() if cfg.mode == "dynamic" else (cfg.epochs, 0, 0)
    head = sum(1 for t in ticks_at if t < head_e * steps_per_epoch)
    dyn = sum(1 for t in ticks_at if head_e * steps_per_epoch <= t < (head_e + dyn_e) * steps_per_epoch)
    tail = len(ticks_at) - head - dyn

    plan, state = _build_plan(model, cfg, (head, dyn, tail))
    rng = substream(cfg.seed, "batch-order")
    velocity: dict = {}
    rows: list[MetricsRow] = []
    peak = 0
    extra = footprint_report(model, plan, cfg.memory).total_bytes if plan is not None else 0
    foot_max = extra
    global_step = 0
    tick = 0
    grad_sums: dict[int, float] = {}

    for epoch in range(cfg.epochs):
        if (
            cfg.realloc_every_epochs > 0
            and epoch > 0
            and epoch % cfg.realloc_every_epochs == 0
            and state is not None
            and grad_sums
        ):
            new_plan = gradient_sum_reallocate(model, state.plan_current, grad_sums, cfg.budget_bytes, cfg.memory)
            if new_plan is not state.plan_current:
                state.plan_current = new_plan
                state.plan_initial = new_plan
                plan = new_plan
                extra = footprint_report(model, plan, cfg.memory).total_bytes
                foot_max = max(foot_max, extra)
        grad_sums = {}
        lr = lr_at(epoch, cfg)

        perm = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for lo in range(0, n, cfg.batch_size):
            if state is not None and global_step % reselect_every == 0:
                tick += 1
                plan = schedule_step(state, tick)
                extra = footprint_report(model, plan, cfg.memory).total_bytes
                foot_max = max(foot_max, extra)
            idx = perm[lo : lo + cfg.batch_size]
            acc_grads: dict[int, ParamGrads] = {}
            for i in idx:
                xi = images[i : i + 1]
                logits, cache = forward(model, xi, plan, cfg.act_prune)
                loss, grad_vec = ops.cross_entropy_loss(logits[0], int(labels[i]))
                epoch_loss += loss
                epoch_correct += int(logits[0].argmax() == labels[i])
                result = backward(model, cache, grad_vec[None, :].astype(logits.dtype), plan)
                peak = max(peak, result.peak_tracked_bytes)
                for nid, g in result.grads.items():
                    held = acc_grads.get(nid)
                    if held is None:
                        acc_grads[nid] = ParamGrads(g.selected, g.grad_w.copy(), g.grad_b.copy())
                    else:
                        held.grad_w += g.grad_w
                        held.grad_b += g.grad_b
            scale = 1.0 / len(idx)
            for nid, g in acc_grads.items():
                g.grad_w *= scale
                g.grad_b *= scale
                if cfg.realloc_every_epochs > 0 and nid != plan.classifier_id:
                    grad_sums[nid] = grad_sums.get(nid, 0.0) + float(
                        np.abs(g.grad_w).sum() + np.abs(g.grad_b).sum()
                    )
            sgd_step(model, acc_grads, lr, cfg.momentum, velocity)
            global_step += 1
        pid = plan.plan_id
        rows.append(MetricsRow(epoch, "train", epoch_loss / n, epoch_correct / n, lr, pid, extra))

        if val_images is not None and val_labels is not None:
            vloss, vacc = evaluate(model, val_images, val_labels, act_prune=cfg.act_prune)
            rows.append(MetricsRow(epoch, "val", vloss, vacc, lr, pid, extra))

        if checkpoint_every > 0 and (epoch + 1) % checkpoint_every == 0:
            base = Path(checkpoint_path)
            save_model(model, base.with_name(f"{base.stem}-epoch{epoch + 1}{base.suffix}"))

    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows)
    return TrainResult(model, rows, plan, peak, foot_max, time.perf_counter() - started)
