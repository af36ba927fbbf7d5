"""Update plans under a byte budget.

The memory model prices exactly the extra bytes backpropagation needs beyond
inference: stored input activations for layers whose weights will be updated,
weight/bias gradient buffers for the selected output channels, and 1-bit ReLU
masks for every ReLU the gradient must cross. Transient grad_in/grad_out
ping-pong buffers are reported separately and never counted against the
budget.

Per-layer charges, all float32 (4 bytes):

    conv      activation Hin*Win*Cin*4        grads kh*kw*Cin*|sel|*4
    dwconv    activation Hin*Win*|sel|*4      grads kh*kw*|sel|*4
    linear    activation Cin*4                grads Cin*|sel|*4
    relu      ceil(Hout*Wout*Cout/8) mask bytes when on the backward path
    bias      |sel|*4 for any trainable layer

Plan selection admits the classifier first, then walks conv layers from the
output end toward the input, admitting each whole (with ceil(r*Cout) channels)
while the cumulative footprint, including the ReLU masks the longer backward
path now needs, stays within budget. The first layer that does not fit stops
the scan, so trainable conv layers always form a contiguous suffix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetError, GraphError, ScheduleError
from .graph import CONV_KINDS, ModelGraph
from .seeding import substream

__all__ = [
    "PlanEntry",
    "UpdatePlan",
    "MemoryModel",
    "LayerFootprint",
    "BudgetReport",
    "select_count",
    "top_norm_channels",
    "layer_footprint",
    "footprint_report",
    "plan_selection",
    "full_plan",
    "classifier_plan",
    "ScheduleConfig",
    "ScheduleState",
    "schedule_step",
    "dynamic_coverage",
    "empirical_coverage",
    "gradient_sum_reallocate",
    "save_plan",
    "load_plan",
]


# --------------------------------------------------------------------------
# plan containers


@dataclass
class PlanEntry:
    trainable: bool
    selected: np.ndarray  # sorted int64 output-channel indices
    ratio_used: float


@dataclass
class UpdatePlan:
    entries: dict[int, PlanEntry]  # node id -> entry, conv/dwconv nodes only
    classifier_id: int | None
    classifier_trainable: bool
    plan_id: int = 0
    policy: str = "suffix"

    def trainable_conv_ids(self) -> list[int]:
        return sorted(i for i, e in self.entries.items() if e.trainable and len(e.selected) > 0)

    def horizon(self) -> int | None:
        """Earliest node whose parameters update; backward stops there."""
        ids = self.trainable_conv_ids()
        if self.classifier_trainable and self.classifier_id is not None:
            ids = ids + [self.classifier_id]
        return min(ids) if ids else None

    def entry(self, node_id: int) -> PlanEntry | None:
        return self.entries.get(node_id)

    def copy(self) -> "UpdatePlan":
        return UpdatePlan(
            {i: PlanEntry(e.trainable, e.selected.copy(), e.ratio_used) for i, e in self.entries.items()},
            self.classifier_id,
            self.classifier_trainable,
            self.plan_id,
            self.policy,
        )


def select_count(ratio: float, channels: int) -> int:
    """ceil(ratio * channels) with protection against float slop."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"update ratio must be in (0, 1], got {ratio}")
    return max(1, math.ceil(ratio * channels - 1e-9))


def channel_norm_order(node) -> np.ndarray:
    """Output channels by descending kernel-slice L2 norm, ties to low index."""
    if node.kind == "conv":
        norms = np.sqrt((node.kernel.astype(np.float64) ** 2).sum(axis=(0, 1, 2)))
    elif node.kind == "dwconv":
        norms = np.sqrt((node.kernel.astype(np.float64) ** 2).sum(axis=(0, 1)))
    else:
        raise GraphError(f"node {node.id} ({node.kind}) has no channel ranking")
    return np.lexsort((np.arange(norms.size), -norms)).astype(np.int64)


def top_norm_channels(node, count: int) -> np.ndarray:
    """Top `count` output channels by kernel-slice L2 norm, sorted ascending."""
    return np.sort(channel_norm_order(node)[:count])


# --------------------------------------------------------------------------
# memory model


@dataclass(frozen=True)
class MemoryModel:
    """Byte prices and accounting scope for the extra-memory total."""

    bytes_per_activation: int = 4
    bytes_per_grad: int = 4
    relu_mask_bits: int = 1
    count_activations: bool = True
    count_weight_grads: bool = True
    count_masks: bool = True
    # Charge gradient buffers only for weight-mask support instead of the
    # full selected slice. Off by default: the standard model prices the
    # dense buffer for the selected channels.
    mask_aware_grads: bool = False


DEFAULT_MEMORY_MODEL = MemoryModel()


@dataclass
class LayerFootprint:
    activation_bytes: int = 0
    weight_grad_bytes: int = 0
    bias_grad_bytes: int = 0
    mask_bytes: int = 0

    def total(self, mem: MemoryModel = DEFAULT_MEMORY_MODEL) -> int:
        t = self.bias_grad_bytes
        if mem.count_activations:
            t += self.activation_bytes
        if mem.count_weight_grads:
            t += self.weight_grad_bytes
        if mem.count_masks:
            t += self.mask_bytes
        return t


def layer_footprint(
    node,
    selected: np.ndarray | None,
    in_shape: tuple[int, ...],
    out_shape: tuple[int, ...],
    mem: MemoryModel = DEFAULT_MEMORY_MODEL,
) -> LayerFootprint:
    """Extra bytes one layer adds when its `selected` channels are trainable.

    For a relu node, `selected` is ignored and the 1-bit backward mask is
    priced; whether the node is on the backward path is the caller's call.
    """
    fp = LayerFootprint()
    if node.kind == "relu":
        numel = int(np.prod(out_shape))
        fp.mask_bytes = (numel * mem.relu_mask_bits + 7) // 8
        return fp
    if selected is None or len(selected) == 0:
        return fp
    nsel = len(selected)
    if node.kind == "conv":
        kh, kw, cin, _ = node.kernel.shape
        fp.activation_bytes = in_shape[0] * in_shape[1] * cin * mem.bytes_per_activation
        dense = kh * kw * cin * nsel
        fp.weight_grad_bytes = _grad_elems(node, selected, dense, mem) * mem.bytes_per_grad
    elif node.kind == "dwconv":
        kh, kw, _ = node.kernel.shape
        fp.activation_bytes = in_shape[0] * in_shape[1] * nsel * mem.bytes_per_activation
        fp.weight_grad_bytes = _grad_elems(node, selected, kh * kw * nsel, mem) * mem.bytes_per_grad
    elif node.kind == "linear":
        cin = node.kernel.shape[0]
        fp.activation_bytes = cin * mem.bytes_per_activation
        fp.weight_grad_bytes = _grad_elems(node, selected, cin * nsel, mem) * mem.bytes_per_grad
    else:
        return fp
    fp.bias_grad_bytes = nsel * mem.bytes_per_grad
    return fp


def _grad_elems(node, selected: np.ndarray, dense_count: int, mem: MemoryModel) -> int:
    if mem.mask_aware_grads and node.weight_mask is not None:
        return int(np.count_nonzero(node.weight_mask[..., selected]))
    return dense_count


# --------------------------------------------------------------------------
# whole-plan reports


@dataclass
class BudgetRow:
    node_id: int
    kind: str
    n_selected: int
    activation_bytes: int
    weight_grad_bytes: int
    bias_grad_bytes: int
    mask_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.activation_bytes + self.weight_grad_bytes + self.bias_grad_bytes + self.mask_bytes


@dataclass
class BudgetReport:
    rows: list[BudgetRow]
    total_bytes: int
    activation_total: int
    weight_grad_total: int
    bias_grad_total: int
    mask_total: int
    dense_total_bytes: int
    dense_activation_total: int
    transient_workspace_bytes: int
    reduction_fraction: float
    feature_reduction_fraction: float
    updated_conv_weight_fraction: float
    updated_param_fraction: float

    CSV_HEADER = (
        "node,kind,selected,activation_bytes,weight_grad_bytes,bias_grad_bytes,mask_bytes,total_bytes"
    )

    def csv_lines(self) -> list[str]:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.node_id},{r.kind},{r.n_selected},{r.activation_bytes},"
                f"{r.weight_grad_bytes},{r.bias_grad_bytes},{r.mask_bytes},{r.total_bytes}"
            )
        lines.append(
            f"TOTAL,,,{self.activation_total},{self.weight_grad_total},"
            f"{self.bias_grad_total},{self.mask_total},{self.total_bytes}"
        )
        return lines


def _plan_parts(model: ModelGraph, plan: UpdatePlan, mem: MemoryModel) -> tuple[list[BudgetRow], int]:
    """Per-layer rows plus the scoped total for one plan."""
    shapes = model.shapes()
    horizon = plan.horizon()
    rows: list[BudgetRow] = []
    total = 0
    for node in model.nodes:
        out_shape = shapes[node.id]
        in_shape = model.in_shape(node)
        if node.kind in CONV_KINDS:
            entry = plan.entry(node.id)
            sel = entry.selected if entry is not None and entry.trainable else np.empty(0, dtype=np.int64)
            fp = layer_footprint(node, sel, in_shape, out_shape, mem)
            rows.append(BudgetRow(node.id, node.kind, len(sel), fp.activation_bytes, fp.weight_grad_bytes, fp.bias_grad_bytes, fp.mask_bytes))
            total += fp.total(mem)
        elif node.kind == "linear":
            if node.id == plan.classifier_id and plan.classifier_trainable:
                sel = np.arange(node.kernel.shape[1], dtype=np.int64)
            else:
                sel = np.empty(0, dtype=np.int64)
            fp = layer_footprint(node, sel, in_shape, out_shape, mem)
            rows.append(BudgetRow(node.id, node.kind, len(sel), fp.activation_bytes, fp.weight_grad_bytes, fp.bias_grad_bytes, fp.mask_bytes))
            total += fp.total(mem)
        elif node.kind == "relu" and horizon is not None and node.id > horizon:
            fp = layer_footprint(node, None, in_shape, out_shape, mem)
            rows.append(BudgetRow(node.id, node.kind, 0, 0, 0, 0, fp.mask_bytes))
            total += fp.total(mem)
    return rows, total


def _transient_workspace(model: ModelGraph, plan: UpdatePlan, mem: MemoryModel) -> int:
    """Peak grad_in/grad_out pair on the backward path, reported, not charged."""
    horizon = plan.horizon()
    if horizon is None:
        return 0
    shapes = model.shapes()
    peak = 0
    for node in model.nodes:
        if node.id < horizon:
            continue
        out_elems = int(np.prod(shapes[node.id]))
        in_elems = sum(
            int(np.prod(model.input_shape if s == -1 else shapes[s])) for s in node.inputs if s == -1 or s >= horizon
        )
        peak = max(peak, (out_elems + in_elems) * mem.bytes_per_grad)
    return peak


def footprint_report(model: ModelGraph, plan: UpdatePlan, mem: MemoryModel = DEFAULT_MEMORY_MODEL) -> BudgetReport:
    rows, total = _plan_parts(model, plan, mem)
    act_total = sum(r.activation_bytes for r in rows)
    grad_total = sum(r.weight_grad_bytes for r in rows)
    bias_total = sum(r.bias_grad_bytes for r in rows)
    mask_total = sum(r.mask_bytes for r in rows)
    dense_rows, dense_total = _plan_parts(model, full_plan(model), mem)
    dense_act = sum(r.activation_bytes for r in dense_rows)
    conv_updated, conv_weights, param_updated, param_total = _update_fractions(model, plan)
    return BudgetReport(
        rows=rows,
        total_bytes=total,
        activation_total=act_total,
        weight_grad_total=grad_total,
        bias_grad_total=bias_total,
        mask_total=mask_total,
        dense_total_bytes=dense_total,
        dense_activation_total=dense_act,
        transient_workspace_bytes=_transient_workspace(model, plan, mem),
        reduction_fraction=1.0 - (total / dense_total) if dense_total else 1.0,
        feature_reduction_fraction=1.0 - (act_total / dense_act) if dense_act else 1.0,
        updated_conv_weight_fraction=conv_updated / conv_weights if conv_weights else 0.0,
        updated_param_fraction=param_updated / param_total if param_total else 0.0,
    )


def _update_fractions(model: ModelGraph, plan: UpdatePlan) -> tuple[int, int, int, int]:
    """Updated vs total weights: conv kernels alone, and all parameters."""
    conv_updated = conv_weights = param_updated = 0
    for node in model.nodes:
        if node.kind in CONV_KINDS:
            conv_weights += node.kernel.size
            entry = plan.entry(node.id)
            if entry is not None and entry.trainable:
                per_channel = node.kernel.size // node.out_channels()
                updated = per_channel * len(entry.selected) + len(entry.selected)
                conv_updated += per_channel * len(entry.selected)
                param_updated += updated
        elif node.kind == "linear" and plan.classifier_trainable and node.id == plan.classifier_id:
            param_updated += node.param_count()
    return conv_updated, conv_weights, param_updated, model.param_count()


# --------------------------------------------------------------------------
# plan construction


def full_plan(model: ModelGraph, ratio: float = 1.0) -> UpdatePlan:
    """Every conv layer trainable at the given ratio; classifier trainable."""
    entries = {}
    for nid in model.conv_ids():
        node = model.node(nid)
        c = node.out_channels()
        s = select_count(ratio, c)
        sel = np.arange(c, dtype=np.int64) if s == c else top_norm_channels(node, s)
        entries[nid] = PlanEntry(True, sel, s / c)
    try:
        classifier = model.classifier_id()
    except GraphError:
        classifier = None
    return UpdatePlan(entries, classifier, classifier is not None, plan_id=0, policy="full")


def classifier_plan(model: ModelGraph) -> UpdatePlan:
    entries = {nid: PlanEntry(False, np.empty(0, dtype=np.int64), 0.0) for nid in model.conv_ids()}
    return UpdatePlan(entries, model.classifier_id(), True, plan_id=0, policy="last")


def plan_selection(
    model: ModelGraph,
    budget_bytes: int,
    ratio: float,
    mem: MemoryModel = DEFAULT_MEMORY_MODEL,
) -> UpdatePlan:
    """Budget-constrained suffix plan; see module docstring for the walk."""
    if budget_bytes <= 0:
        raise BudgetError(f"budget must be positive, got {budget_bytes}")
    classifier = model.classifier_id()
    entries = {nid: PlanEntry(False, np.empty(0, dtype=np.int64), 0.0) for nid in model.conv_ids()}
    plan = UpdatePlan(entries, classifier, True, plan_id=0)
    _, total = _plan_parts(model, plan, mem)
    if total > budget_bytes:
        raise BudgetError(
            f"classifier alone needs {total} bytes, over the {budget_bytes}-byte budget"
        )
    for nid in reversed(model.conv_ids()):
        node = model.node(nid)
        c = node.out_channels()
        s = select_count(ratio, c)
        candidate = plan.copy()
        candidate.entries[nid] = PlanEntry(True, top_norm_channels(node, s), s / c)
        _, cand_total = _plan_parts(model, candidate, mem)
        if cand_total > budget_bytes:
            break
        plan = candidate
    plan.plan_id = 0
    return plan


# --------------------------------------------------------------------------
# three-stage update schedule


@dataclass(frozen=True)
class ScheduleConfig:
    """Stage lengths: j fixed steps, k dynamic steps, l late fixed steps."""

    fixed_head: int
    dynamic: int
    fixed_tail: int
    ratio: float
    budget_bytes: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.fixed_head < 0 or self.dynamic < 0 or self.fixed_tail < 0:
            raise ScheduleError("stage lengths must be non-negative")

    @property
    def horizon_steps(self) -> int:
        return self.fixed_head + self.dynamic + self.fixed_tail


@dataclass
class ScheduleState:
    cfg: ScheduleConfig
    model: ModelGraph
    plan_initial: UpdatePlan
    plan_current: UpdatePlan
    rng: np.random.Generator
    cursor: int = 0
    mem: MemoryModel = DEFAULT_MEMORY_MODEL

    @classmethod
    def from_selection(
        cls, model: ModelGraph, cfg: ScheduleConfig, mem: MemoryModel = DEFAULT_MEMORY_MODEL
    ) -> "ScheduleState":
        plan = plan_selection(model, cfg.budget_bytes, cfg.ratio, mem)
        return cls(cfg, model, plan, plan, substream(cfg.seed, "schedule-redraw"), 0, mem)

    @classmethod
    def from_plan(
        cls, model: ModelGraph, cfg: ScheduleConfig, plan: UpdatePlan, mem: MemoryModel = DEFAULT_MEMORY_MODEL
    ) -> "ScheduleState":
        return cls(cfg, model, plan, plan, substream(cfg.seed, "schedule-redraw"), 0, mem)


def schedule_step(state: ScheduleState, t: int) -> UpdatePlan:
    """Plan for step t. Steps must be visited sequentially from t=1.

    Stage semantics: t <= j returns the initial plan object unchanged;
    j < t <= j+k redraws every trainable conv layer's channels uniformly
    without replacement (layer set and sizes fixed); t > j+k returns the
    last dynamic draw, frozen.
    """
    cfg = state.cfg
    if t != state.cursor + 1:
        raise ScheduleError(f"schedule is sequential: expected t={state.cursor + 1}, got t={t}")
    if t > cfg.horizon_steps:
        raise ScheduleError(f"t={t} exceeds the schedule horizon {cfg.horizon_steps}")
    state.cursor = t
    if t <= cfg.fixed_head or t > cfg.fixed_head + cfg.dynamic:
        return state.plan_current
    plan = state.plan_current.copy()
    for nid in state.plan_initial.trainable_conv_ids():
        node = state.model.node(nid)
        c = node.out_channels()
        s = len(state.plan_initial.entries[nid].selected)
        sel = np.sort(state.rng.choice(c, size=s, replace=False)).astype(np.int64)
        plan.entries[nid] = PlanEntry(True, sel, s / c)
    plan.plan_id = t
    _, total = _plan_parts(state.model, plan, state.mem)
    if total > cfg.budget_bytes:
        raise BudgetError(f"redraw at t={t} exceeds budget: {total} > {cfg.budget_bytes}")
    state.plan_current = plan
    return plan


def dynamic_coverage(ratio: float, k: int, cout: int) -> float:
    """Expected fraction of channels ever selected.

    With no dynamic draws the initial plan alone covers s/Cout. With k >= 1
    uniform redraws of size s the never-selected fraction is (1 - s/Cout)^k.
    """
    s = select_count(ratio, cout)
    if k == 0:
        return s / cout
    return 1.0 - (1.0 - s / cout) ** k


def empirical_coverage(ratio: float, k: int, cout: int, trials: int, seed: int = 0) -> np.ndarray:
    """Per-trial covered fraction over k seeded redraws."""
    rng = substream(seed, "coverage-trials")
    s = select_count(ratio, cout)
    out = np.empty(trials)
    for i in range(trials):
        hit = np.zeros(cout, dtype=bool)
        for _ in range(k):
            hit[rng.choice(cout, size=s, replace=False)] = True
        out[i] = hit.mean()
    return out


# --------------------------------------------------------------------------
# experimental reallocation policy


def gradient_sum_reallocate(
    model: ModelGraph,
    plan: UpdatePlan,
    grad_l1: dict[int, float],
    budget_bytes: int,
    mem: MemoryModel = DEFAULT_MEMORY_MODEL,
) -> UpdatePlan:
    """Freeze low-gradient layers, regrow channel counts on strong ones.

    Experimental ablation policy: layers whose accumulated gradient L1 sum
    falls strictly below the mean over trainable layers are frozen; the freed
    budget raises channel counts of the surviving layers in descending
    gradient order, one channel at a time while the footprint stays within
    budget. Equal sums keep the incumbent plan untouched.
    """
    ids = plan.trainable_conv_ids()
    if len(ids) < 2:
        return plan
    missing = [i for i in ids if i not in grad_l1]
    if missing:
        raise ValueError(f"gradient sums missing for layers {missing}")
    sums = np.array([grad_l1[i] for i in ids], dtype=np.float64)
    freeze = [i for i, s in zip(ids, sums) if s < sums.mean()]
    if not freeze:
        return plan
    out = plan.copy()
    out.policy = "gradsum"
    for nid in freeze:
        out.entries[nid] = PlanEntry(False, np.empty(0, dtype=np.int64), 0.0)
    survivors = sorted((i for i in ids if i not in freeze), key=lambda i: (-grad_l1[i], i))
    for nid in survivors:
        node = model.node(nid)
        c = node.out_channels()
        ranked = channel_norm_order(node)
        while len(out.entries[nid].selected) < c:
            have = set(out.entries[nid].selected.tolist())
            nxt = next(int(ch) for ch in ranked if int(ch) not in have)
            candidate = out.copy()
            sel = np.sort(np.append(candidate.entries[nid].selected, nxt)).astype(np.int64)
            candidate.entries[nid] = PlanEntry(True, sel, len(sel) / c)
            _, total = _plan_parts(model, candidate, mem)
            if total > budget_bytes:
                break
            out = candidate
    _, total = _plan_parts(model, out, mem)
    if total > budget_bytes:
        raise BudgetError(f"reallocated plan exceeds budget: {total} > {budget_bytes}")
    return out


# --------------------------------------------------------------------------
# plan files

PLAN_FORMAT = "sparsetrain-plan-v1"


def save_plan(plan: UpdatePlan, path, budget_bytes: int | None = None, seed: int | None = None) -> None:
    """Write a plan as a flat key/value file; loadable with load_plan.

    budget_bytes and seed are provenance and do not affect loading.
    """
    from .kvfile import write_kv

    out: dict = {"format": PLAN_FORMAT, "plan_id": plan.plan_id, "policy": plan.policy}
    if budget_bytes is not None:
        out["budget_bytes"] = budget_bytes
    if seed is not None:
        out["seed"] = seed
    out["classifier_id"] = "none" if plan.classifier_id is None else plan.classifier_id
    out["classifier_trainable"] = plan.classifier_trainable
    for nid in sorted(plan.entries):
        e = plan.entries[nid]
        out[f"layer.{nid}.trainable"] = e.trainable
        out[f"layer.{nid}.ratio"] = float(e.ratio_used)
        out[f"layer.{nid}.selected"] = " ".join(str(int(c)) for c in e.selected)
    write_kv(path, out)


def load_plan(path) -> UpdatePlan:
    from .errors import ConfigError
    from .kvfile import read_kv

    kv = read_kv(path)
    if kv.get("format") != PLAN_FORMAT:
        raise ConfigError(f"{path}: not a plan file (format {kv.get('format')!r})")
    entries: dict[int, PlanEntry] = {}
    for key, value in kv.items():
        if not key.startswith("layer."):
            continue
        _, nid_s, attr = key.split(".", 2)
        nid = int(nid_s)
        if nid not in entries:
            entries[nid] = PlanEntry(False, np.empty(0, dtype=np.int64), 0.0)
        if attr == "trainable":
            entries[nid].trainable = value == "true"
        elif attr == "ratio":
            entries[nid].ratio_used = float(value)
        elif attr == "selected":
            sel = np.array([int(t) for t in value.split()], dtype=np.int64) if value else np.empty(0, dtype=np.int64)
            entries[nid].selected = sel
        else:
            raise ConfigError(f"{path}: unknown plan key {key!r}")
    cid = None if kv["classifier_id"] == "none" else int(kv["classifier_id"])
    return UpdatePlan(
        dict(sorted(entries.items())),
        cid,
        kv["classifier_trainable"] == "true",
        int(kv["plan_id"]),
        kv.get("policy", "suffix"),
    )
