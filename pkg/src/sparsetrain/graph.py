"""Model graphs for the supported layer set.

A ModelGraph is a topologically ordered list of LayerNodes. Node inputs refer
to earlier node ids; the sentinel INPUT_ID (-1) refers to the model input.
The graph is static: shapes are inferred once per (graph, input size) and all
training-time decisions (what to store, what to update) key off node ids.

Supported kinds:
    conv      kernel (kh, kw, Cin, Cout), bias (Cout,), stride, pad
    dwconv    kernel (kh, kw, C), bias (C,), stride, pad
    linear    weight (Cin, Cout), bias (Cout,)
    relu      ReLU fused with block activation pruning at forward time
    gn        frozen group normalization: per-channel gamma/beta/mean/var
    add       residual addition of two equal-shape inputs
    avgpool   global average pool to 1x1
    flatten   (H, W, C) -> vector
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GraphError, ShapeError
from .ops import conv2d_out_hw

INPUT_ID = -1

CONV_KINDS = ("conv", "dwconv")
PARAM_KINDS = ("conv", "dwconv", "linear")
ALL_KINDS = ("conv", "dwconv", "linear", "relu", "gn", "add", "avgpool", "flatten")


@dataclass
class LayerNode:
    id: int
    kind: str
    inputs: list[int]
    kernel: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int = 0
    weight_mask: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    groups: int = 1
    eps: float = 1e-5

    def out_channels(self) -> int:
        if self.kind == "conv":
            return self.kernel.shape[3]
        if self.kind == "dwconv":
            return self.kernel.shape[2]
        if self.kind == "linear":
            return self.kernel.shape[1]
        raise GraphError(f"node {self.id} ({self.kind}) has no output channels")

    def in_channels(self) -> int:
        if self.kind == "conv":
            return self.kernel.shape[2]
        if self.kind == "dwconv":
            return self.kernel.shape[2]
        if self.kind == "linear":
            return self.kernel.shape[0]
        raise GraphError(f"node {self.id} ({self.kind}) has no input channels")

    def param_count(self) -> int:
        n = 0
        if self.kernel is not None:
            n += self.kernel.size
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass
class ModelGraph:
    nodes: list[LayerNode]
    input_shape: tuple[int, int, int]  # (H, W, C)
    num_classes: int
    _shapes: list[tuple[int, ...]] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.validate()

    # -- structure ---------------------------------------------------------

    def validate(self) -> None:
        seen: set[int] = set()
        for pos, node in enumerate(self.nodes):
            if node.id != pos:
                raise GraphError(f"node ids must match list position, got id {node.id} at {pos}")
            if node.kind not in ALL_KINDS:
                raise GraphError(f"unknown layer kind {node.kind!r} at node {node.id}")
            want = 2 if node.kind == "add" else 1
            if len(node.inputs) != want:
                raise GraphError(f"node {node.id} ({node.kind}) needs {want} inputs, got {len(node.inputs)}")
            for src in node.inputs:
                if src != INPUT_ID and src not in seen:
                    raise GraphError(f"node {node.id} references {src}, which is not an earlier node")
            seen.add(node.id)
        if not self.nodes:
            raise GraphError("empty graph")

    def node(self, node_id: int) -> LayerNode:
        return self.nodes[node_id]

    def output_id(self) -> int:
        return self.nodes[-1].id

    def conv_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.kind in CONV_KINDS]

    def classifier_id(self) -> int:
        """Final linear node; raises if the graph has none."""
        for node in reversed(self.nodes):
            if node.kind == "linear":
                return node.id
        raise GraphError("graph has no linear classifier node")

    def consumers(self, node_id: int) -> list[int]:
        return [n.id for n in self.nodes if node_id in n.inputs]

    # -- shapes ------------------------------------------------------------

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every node (no batch axis), cached."""
        if self._shapes is None:
            self._shapes = self._infer_shapes()
        return self._shapes

    def in_shape(self, node: LayerNode) -> tuple[int, ...]:
        src = node.inputs[0]
        return self.input_shape if src == INPUT_ID else self.shapes()[src]

    def _infer_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []

        def shape_of(src: int) -> tuple[int, ...]:
            return self.input_shape if src == INPUT_ID else shapes[src]

        for node in self.nodes:
            s = shape_of(node.inputs[0])
            if node.kind == "conv":
                if len(s) != 3 or s[2] != node.kernel.shape[2]:
                    raise ShapeError(f"node {node.id}: conv over {s} with kernel {node.kernel.shape}")
                ho, wo = conv2d_out_hw((s[0], s[1]), node.kernel.shape[0], node.kernel.shape[1], node.stride, node.pad)
                shapes.append((ho, wo, node.kernel.shape[3]))
            elif node.kind == "dwconv":
                if len(s) != 3 or s[2] != node.kernel.shape[2]:
                    raise ShapeError(f"node {node.id}: depthwise over {s} with kernel {node.kernel.shape}")
                ho, wo = conv2d_out_hw((s[0], s[1]), node.kernel.shape[0], node.kernel.shape[1], node.stride, node.pad)
                shapes.append((ho, wo, s[2]))
            elif node.kind == "linear":
                if len(s) != 1 or s[0] != node.kernel.shape[0]:
                    raise ShapeError(f"node {node.id}: linear over {s} with weight {node.kernel.shape}")
                shapes.append((node.kernel.shape[1],))
            elif node.kind == "gn":
                if s[-1] != node.gamma.shape[0]:
                    raise ShapeError(f"node {node.id}: gn over {s} with {node.gamma.shape[0]} channels")
                if s[-1] % node.groups != 0:
                    raise ShapeError(f"node {node.id}: {s[-1]} channels not divisible by {node.groups} groups")
                shapes.append(s)
            elif node.kind == "add":
                s2 = shape_of(node.inputs[1])
                if s != s2:
                    raise ShapeError(f"node {node.id}: add over mismatched shapes {s} and {s2}")
                shapes.append(s)
            elif node.kind == "avgpool":
                if len(s) != 3:
                    raise ShapeError(f"node {node.id}: avgpool needs a spatial input, got {s}")
                shapes.append((1, 1, s[2]))
            elif node.kind == "flatten":
                shapes.append((int(np.prod(s)),))
            else:  # relu
                shapes.append(s)
        return shapes

    # -- copies ------------------------------------------------------------

    def copy(self) -> "ModelGraph":
        nodes = []
        for n in self.nodes:
            nodes.append(
                replace(
                    n,
                    inputs=list(n.inputs),
                    kernel=None if n.kernel is None else n.kernel.copy(),
                    bias=None if n.bias is None else n.bias.copy(),
                    weight_mask=None if n.weight_mask is None else n.weight_mask.copy(),
                    gamma=None if n.gamma is None else n.gamma.copy(),
                    beta=None if n.beta is None else n.beta.copy(),
                    mean=None if n.mean is None else n.mean.copy(),
                    var=None if n.var is None else n.var.copy(),
                )
            )
        return ModelGraph(nodes, self.input_shape, self.num_classes)

    def astype(self, dtype) -> "ModelGraph":
        """Deep copy with all float parameters cast (f64 for gradient checks)."""
        out = self.copy()
        for n in out.nodes:
            for attr in ("kernel", "bias", "gamma", "beta", "mean", "var"):
                arr = getattr(n, attr)
                if arr is not None:
                    setattr(n, attr, arr.astype(dtype))
        return out

    def param_count(self) -> int:
        return sum(n.param_count() for n in self.nodes)


def gn_groups_for(channels: int) -> int:
    """Group count convention: gcd(C, 8) keeps divisibility for any width."""
    return math.gcd(channels, 8)
