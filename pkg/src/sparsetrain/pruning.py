"""Structured pruning: channel removal, sparsity profiles, kernel patterns.

Channel pruning is group-wise. A dependency group collects every channel axis
that must shrink together: a conv's output channels, the normalization
channels fed by it, any depthwise conv riding on them, residual-add partners,
and the next conv's input channels. Groups are found with a union-find over
"channel variables" flowing through the graph; axes touching the model input,
the model output, or the classifier output are boundary axes and never prune.

Weight sparsification is two-staged, applied per layer against a sparsity
profile:
  * 3x3 kernels each keep one 4-position pattern from a fixed library
    (chosen to retain the most absolute mass),
  * the lowest-norm kernels of each filter are then zeroed whole
    (connectivity pruning) until the layer reaches its assigned sparsity;
    every filter of a layer zeroes the same number of kernels, so all
    filters of a layer end at equal sparsity.
1x1 convs skip patterns and are subject to connectivity pruning alone.
Depthwise kernels are left dense: zeroing a depthwise kernel would sever its
channel outright, which is channel pruning's job, not the weight stage's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GraphError, PruningError
from .graph import INPUT_ID, ModelGraph

__all__ = [
    "DependencyGroup",
    "build_dependency_groups",
    "channel_prune",
    "PatternLibrary",
    "DEFAULT_PATTERNS",
    "SparsityProfile",
    "LayerAssignment",
    "assign_layer_sparsity",
    "pattern_prune",
    "SparsityReport",
    "sparsity_report",
]


# --------------------------------------------------------------------------
# dependency groups


@dataclass(frozen=True)
class DependencyGroup:
    """Channel axes that must be pruned together. axis is 'out', 'in' or 'c'."""

    members: tuple[tuple[int, str], ...]
    channels: int


class _UnionFind:
    def __init__(self) -> None:
        self.parent: dict[int, int] = {}

    def make(self) -> int:
        v = len(self.parent)
        self.parent[v] = v
        return v

    def find(self, v: int) -> int:
        while self.parent[v] != v:
            self.parent[v] = self.parent[self.parent[v]]
            v = self.parent[v]
        return v

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)
        return self.find(ra)


def build_dependency_groups(model: ModelGraph) -> list[DependencyGroup]:
    uf = _UnionFind()
    axes: list[tuple[int, int, str]] = []  # (var, node_id, axis)
    boundary: set[int] = set()

    input_var = uf.make()
    boundary.add(input_var)
    out_var: dict[int, int] = {INPUT_ID: input_var}
    shapes = model.shapes()

    for node in model.nodes:
        src = node.inputs[0]
        v_in = out_var[src]
        if node.kind == "conv":
            axes.append((v_in, node.id, "in"))
            v = uf.make()
            axes.append((v, node.id, "out"))
            out_var[node.id] = v
        elif node.kind == "dwconv":
            axes.append((v_in, node.id, "c"))
            out_var[node.id] = v_in
        elif node.kind == "gn":
            axes.append((v_in, node.id, "c"))
            out_var[node.id] = v_in
        elif node.kind == "linear":
            axes.append((v_in, node.id, "in"))
            v = uf.make()
            boundary.add(v)  # classifier outputs are class scores
            out_var[node.id] = v
        elif node.kind == "add":
            out_var[node.id] = uf.union(v_in, out_var[node.inputs[1]])
        elif node.kind == "flatten":
            in_shape = model.in_shape(node)
            if len(in_shape) == 3 and in_shape[0] == 1 and in_shape[1] == 1:
                out_var[node.id] = v_in  # 1x1 spatial: channels carry through
            else:
                boundary.add(uf.find(v_in))  # spatial flatten pins the producer
                v = uf.make()
                boundary.add(v)
                out_var[node.id] = v
        else:  # relu, avgpool
            out_var[node.id] = v_in

    boundary.add(uf.find(out_var[model.output_id()]))
    roots = {uf.find(v) for v in boundary}

    grouped: dict[int, list[tuple[int, str]]] = {}
    for var, nid, axis in axes:
        root = uf.find(var)
        if root in roots:
            continue
        grouped.setdefault(root, []).append((nid, axis))

    groups = []
    for root in sorted(grouped):
        members = tuple(sorted(grouped[root]))
        counts = {_axis_channels(model.node(nid), axis) for nid, axis in members}
        if len(counts) != 1:
            raise GraphError(f"unsupported topology: coupled axes disagree on channel count: {members}")
        groups.append(DependencyGroup(members, counts.pop()))
    return groups


def _axis_channels(node, axis: str) -> int:
    if node.kind == "conv":
        return node.kernel.shape[3] if axis == "out" else node.kernel.shape[2]
    if node.kind == "dwconv":
        return node.kernel.shape[2]
    if node.kind == "gn":
        return node.gamma.shape[0]
    if node.kind == "linear":
        return node.kernel.shape[0] if axis == "in" else node.kernel.shape[1]
    raise GraphError(f"node {node.id} ({node.kind}) carries no prunable axis")


# --------------------------------------------------------------------------
# channel pruning


def channel_prune(model: ModelGraph, keep_ratio: float) -> ModelGraph:
    """Remove low-norm channels group-wise; shapes shrink physically.

    Channels are ranked by the L2 norm over all coupled parameter slices
    (kernels, biases, normalization gamma/beta; frozen statistics are sliced
    along but do not vote). Each group keeps ceil(keep_ratio * C) channels,
    ties resolved toward the lower channel index.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise PruningError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    out = model.copy()
    for group in build_dependency_groups(model):
        c = group.channels
        keep_n = max(1, math.ceil(keep_ratio * c - 1e-9))
        sq = np.zeros(c, dtype=np.float64)
        for nid, axis in group.members:
            node = out.node(nid)
            if node.kind == "conv" and axis == "out":
                sq += (node.kernel.astype(np.float64) ** 2).sum(axis=(0, 1, 2))
                sq += node.bias.astype(np.float64) ** 2
            elif node.kind == "conv" and axis == "in":
                sq += (node.kernel.astype(np.float64) ** 2).sum(axis=(0, 1, 3))
            elif node.kind == "dwconv":
                sq += (node.kernel.astype(np.float64) ** 2).sum(axis=(0, 1))
                sq += node.bias.astype(np.float64) ** 2
            elif node.kind == "gn":
                sq += node.gamma.astype(np.float64) ** 2
                sq += node.beta.astype(np.float64) ** 2
            elif node.kind == "linear" and axis == "in":
                sq += (node.kernel.astype(np.float64) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(c), -np.sqrt(sq)))
        keep = np.sort(order[:keep_n])
        for nid, axis in group.members:
            _slice_axis(out.node(nid), axis, keep)
    rebuilt = ModelGraph(out.nodes, out.input_shape, out.num_classes)
    rebuilt.shapes()  # revalidate end to end
    return rebuilt


def _slice_axis(node, axis: str, keep: np.ndarray) -> None:
    if node.kind == "conv" and axis == "out":
        node.kernel = node.kernel[:, :, :, keep]
        node.bias = node.bias[keep]
        if node.weight_mask is not None:
            node.weight_mask = node.weight_mask[:, :, :, keep]
    elif node.kind == "conv" and axis == "in":
        node.kernel = node.kernel[:, :, keep, :]
        if node.weight_mask is not None:
            node.weight_mask = node.weight_mask[:, :, keep, :]
    elif node.kind == "dwconv":
        node.kernel = node.kernel[:, :, keep]
        node.bias = node.bias[keep]
        if node.weight_mask is not None:
            node.weight_mask = node.weight_mask[:, :, keep]
    elif node.kind == "gn":
        for attr in ("gamma", "beta", "mean", "var"):
            setattr(node, attr, getattr(node, attr)[keep])
        node.groups = math.gcd(len(keep), 8)
    elif node.kind == "linear" and axis == "in":
        node.kernel = node.kernel[keep, :]
        if node.weight_mask is not None:
            node.weight_mask = node.weight_mask[keep, :]
    else:
        raise GraphError(f"cannot slice axis {axis!r} of node {node.id} ({node.kind})")


# --------------------------------------------------------------------------
# pattern library


def _pattern(positions: list[tuple[int, int]]) -> np.ndarray:
    p = np.zeros((3, 3), dtype=bool)
    for r, c in positions:
        p[r, c] = True
    return p


_CENTER = (1, 1)
_EDGES = [(0, 1), (1, 0), (1, 2), (2, 1)]
_CORNERS = [(0, 0), (0, 2), (2, 0), (2, 2)]


def _default_patterns() -> tuple[np.ndarray, ...]:
    pats = []
    for drop in range(4):  # center + 3 of 4 edge midpoints
        pats.append(_pattern([_CENTER] + [e for i, e in enumerate(_EDGES) if i != drop]))
    for drop in range(4):  # center + 3 of 4 corners
        pats.append(_pattern([_CENTER] + [c for i, c in enumerate(_CORNERS) if i != drop]))
    pats.append(_pattern(_EDGES))  # the cross: all four edge midpoints
    return tuple(pats)


@dataclass(frozen=True)
class PatternLibrary:
    """Fixed set of same-population kernel patterns for one spatial size."""

    name: str
    kh: int
    kw: int
    patterns: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        pops = {int(p.sum()) for p in self.patterns}
        if len(pops) != 1:
            raise PruningError(f"library {self.name}: patterns have unequal population {pops}")

    @property
    def kept(self) -> int:
        return int(self.patterns[0].sum())

    def stacked(self) -> np.ndarray:
        return np.stack(self.patterns)


DEFAULT_PATTERNS = PatternLibrary("center8+cross", 3, 3, _default_patterns())


# --------------------------------------------------------------------------
# sparsity profile


@dataclass(frozen=True)
class LayerAssignment:
    sparsity: float
    connectivity_steps: int  # kernels zeroed whole, per filter
    mean_abs_weight: float


@dataclass
class SparsityProfile:
    global_target: float
    layers: dict[int, LayerAssignment]  # node id -> assignment

    def order_key(self) -> list[int]:
        """Node ids sorted by descending mean |w| (the ramp's layer order)."""
        return sorted(self.layers, key=lambda nid: (-self.layers[nid].mean_abs_weight, nid))


def _layer_grid(node, library: PatternLibrary) -> np.ndarray:
    """Achievable sparsities, indexed by per-filter connectivity steps."""
    kh, kw, cin, _ = node.kernel.shape
    if (kh, kw) == (library.kh, library.kw):
        m = library.kept
        base = kh * kw - m
        q = np.arange(cin)  # keep at least one live kernel per filter
        return (cin * base + q * m) / (kh * kw * cin)
    if (kh, kw) == (1, 1):
        return np.arange(cin) / cin
    raise PruningError(f"node {node.id}: no pattern treatment for {kh}x{kw} kernels")


def _covered_nodes(model: ModelGraph) -> list:
    out = []
    for node in model.nodes:
        if node.kind != "conv":
            continue
        kh, kw = node.kernel.shape[:2]
        if (kh, kw) not in ((3, 3), (1, 1)):
            raise PruningError(f"node {node.id}: unsupported {kh}x{kw} kernel for weight pruning")
        out.append(node)
    return out


def assign_layer_sparsity(
    model: ModelGraph, global_target: float, library: PatternLibrary = DEFAULT_PATTERNS
) -> SparsityProfile:
    """Per-layer sparsity targets that average to the global target.

    Layers are ranked by mean |w|; a linear ramp gives heavier layers less
    sparsity, then the ramp level is solved so the weighted average hits the
    target. Values are quantized to each layer's achievable grid under a
    monotone floor, and a greedy trim walks single-step moves to pull the
    total as close to the target as the grids allow.
    """
    if not 0.0 <= global_target < 1.0:
        raise PruningError(f"global sparsity target must be in [0, 1), got {global_target}")
    nodes = _covered_nodes(model)
    if not nodes:
        raise PruningError("model has no conv layers to assign sparsity to")

    grids = {n.id: _layer_grid(n, library) for n in nodes}
    weights = {n.id: n.kernel.size for n in nodes}
    mean_abs = {n.id: float(np.abs(n.kernel).mean()) for n in nodes}
    total_w = sum(weights.values())
    target_zeros = global_target * total_w

    lo = min(g.min() for g in grids.values())
    hi = max(g.max() for g in grids.values())
    if target_zeros < sum(weights[n.id] * grids[n.id].min() for n in nodes) - 1e-9:
        raise PruningError(
            f"target {global_target} below the pattern floor; 3x3 layers cannot go sparser than their pattern"
        )
    if target_zeros > sum(weights[n.id] * grids[n.id].max() for n in nodes) + 1e-9:
        raise PruningError(f"target {global_target} above what connectivity pruning can reach")

    # rank in [0, 1]: 0 for the largest mean |w|; ties share a rank
    uniq = sorted(set(mean_abs.values()), reverse=True)
    denom = max(1, len(uniq) - 1)
    rank = {nid: uniq.index(m) / denom for nid, m in mean_abs.items()}

    tilt = 0.2 * min(global_target, 1.0 - global_target)

    def continuous(level: float, nid: int) -> float:
        g = grids[nid]
        return float(np.clip(level + tilt * rank[nid], g.min(), g.max()))

    level_lo, level_hi = lo - tilt - 1.0, hi + 1.0
    for _ in range(80):
        mid = 0.5 * (level_lo + level_hi)
        z = sum(weights[nid] * continuous(mid, nid) for nid in rank)
        if z < target_zeros:
            level_lo = mid
        else:
            level_hi = mid
    level = 0.5 * (level_lo + level_hi)

    # quantize under a monotone floor along descending mean |w|
    order = sorted(rank, key=lambda nid: (-mean_abs[nid], nid))
    steps: dict[int, int] = {}
    floor = 0.0
    for nid in order:
        g = grids[nid]
        want = max(continuous(level, nid), floor)
        q = int(np.argmin(np.abs(g - want)))
        if g[q] < floor - 1e-12:
            above = np.nonzero(g >= floor - 1e-12)[0]
            q = int(above[0]) if above.size else len(g) - 1
        steps[nid] = q
        floor = float(g[q])

    _trim(order, grids, weights, steps, mean_abs, target_zeros)

    layers = {
        nid: LayerAssignment(float(grids[nid][steps[nid]]), steps[nid], mean_abs[nid]) for nid in rank
    }
    return SparsityProfile(global_target, layers)


def _trim(order, grids, weights, steps, mean_abs, target_zeros) -> None:
    """Greedy single-step moves toward the target, keeping the ramp monotone."""

    def total() -> float:
        return sum(weights[nid] * grids[nid][steps[nid]] for nid in order)

    def legal(nid: int, q: int) -> bool:
        if not 0 <= q < len(grids[nid]):
            return False
        pos = order.index(nid)
        s = grids[nid][q]
        for other in order[:pos]:
            if mean_abs[other] == mean_abs[nid]:
                return False  # tied layers move only in lockstep; skip
            if grids[other][steps[other]] > s + 1e-12:
                return False
        for other in order[pos + 1 :]:
            if mean_abs[other] == mean_abs[nid]:
                return False
            if grids[other][steps[other]] < s - 1e-12:
                return False
        return True

    for _ in range(256):
        err = total() - target_zeros
        best = None
        for nid in order:
            for q in (steps[nid] - 1, steps[nid] + 1):
                if not legal(nid, q):
                    continue
                delta = weights[nid] * (grids[nid][q] - grids[nid][steps[nid]])
                new_err = abs(err + delta)
                if new_err < abs(err) - 1e-9 and (best is None or new_err < best[0]):
                    best = (new_err, nid, q)
        if best is None:
            break
        steps[best[1]] = best[2]


# --------------------------------------------------------------------------
# pattern + connectivity pruning


def pattern_prune(
    model: ModelGraph, profile: SparsityProfile, library: PatternLibrary = DEFAULT_PATTERNS
) -> ModelGraph:
    """Apply patterns and connectivity zeroing per the profile.

    Masked weights are set to exactly zero and recorded in the node's weight
    mask, so gradient masking keeps them zero for the rest of the model's
    life. Every spatial (3x3) conv must be covered by the profile; 1x1 convs
    and other layer kinds may be absent and are then left untouched.
    """
    for node in model.nodes:
        if node.kind == "conv" and node.kernel.shape[:2] == (library.kh, library.kw):
            if node.id not in profile.layers:
                raise PruningError(f"profile is missing 3x3 conv node {node.id}")
    out = model.copy()
    for nid, assignment in sorted(profile.layers.items()):
        node = out.node(nid)
        if node.kind != "conv":
            raise PruningError(f"profile covers node {nid}, which is {node.kind}, not conv")
        kh, kw, cin, cout = node.kernel.shape
        q = assignment.connectivity_steps
        if (kh, kw) == (library.kh, library.kw):
            absw = np.abs(node.kernel.astype(np.float64))
            scores = np.einsum("ijco,pij->cop", absw, library.stacked().astype(np.float64))
            choice = scores.argmax(axis=2)  # first max wins: lowest pattern index
            mask = library.stacked()[choice]  # (cin, cout, kh, kw)
            mask = mask.transpose(2, 3, 0, 1)
        elif (kh, kw) == (1, 1):
            mask = np.ones((kh, kw, cin, cout), dtype=bool)
        else:
            raise PruningError(f"node {nid}: no pattern treatment for {kh}x{kw} kernels")
        if q > 0:
            masked = np.where(mask, node.kernel.astype(np.float64), 0.0)
            norms = np.sqrt((masked**2).sum(axis=(0, 1)))  # (cin, cout)
            for o in range(cout):
                drop = np.lexsort((np.arange(cin), norms[:, o]))[:q]
                mask[:, :, drop, o] = False
        if node.weight_mask is not None:
            mask &= node.weight_mask
        node.weight_mask = mask
        node.kernel = np.where(mask, node.kernel, node.kernel.dtype.type(0))
    return out


# --------------------------------------------------------------------------
# reporting


@dataclass
class SparsityRow:
    node_id: int
    kind: str
    params: int
    zeros: int
    sparsity: float  # removed fraction
    density: float  # kept fraction; both conventions exist in the wild
    flops_dense: int
    flops_masked: int


@dataclass
class SparsityReport:
    rows: list[SparsityRow]
    total_params: int
    total_zeros: int
    global_sparsity: float
    global_density: float
    total_flops_dense: int
    total_flops_masked: int

    CSV_HEADER = "node,kind,params,zeros,sparsity,density,flops_dense,flops_masked"

    def csv_lines(self) -> list[str]:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.node_id},{r.kind},{r.params},{r.zeros},{r.sparsity!r},{r.density!r},"
                f"{r.flops_dense},{r.flops_masked}"
            )
        lines.append(
            f"TOTAL,,{self.total_params},{self.total_zeros},{self.global_sparsity!r},"
            f"{self.global_density!r},{self.total_flops_dense},{self.total_flops_masked}"
        )
        return lines


def sparsity_report(model: ModelGraph) -> SparsityReport:
    """Kernel-weight sparsity and FLOPs per layer.

    params counts kernel weights only (biases and normalization parameters
    are excluded). sparsity is the removed fraction and density the kept
    fraction; both are emitted because conventions differ. One
    multiply-accumulate counts as one FLOP.
    """
    shapes = model.shapes()
    rows = []
    for node in model.nodes:
        if node.kind not in ("conv", "dwconv", "linear"):
            continue
        zeros = int(np.count_nonzero(node.kernel == 0))
        nnz = node.kernel.size - zeros
        if node.kind == "linear":
            dense = node.kernel.size
            masked = nnz
        else:
            ho, wo = shapes[node.id][0], shapes[node.id][1]
            dense = ho * wo * node.kernel.size
            masked = ho * wo * nnz
        rows.append(
            SparsityRow(
                node.id,
                node.kind,
                node.kernel.size,
                zeros,
                zeros / node.kernel.size,
                nnz / node.kernel.size,
                dense,
                masked,
            )
        )
    tp = sum(r.params for r in rows)
    tz = sum(r.zeros for r in rows)
    return SparsityReport(
        rows,
        tp,
        tz,
        tz / tp if tp else 0.0,
        (tp - tz) / tp if tp else 1.0,
        sum(r.flops_dense for r in rows),
        sum(r.flops_masked for r in rows),
    )
