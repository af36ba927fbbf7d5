"""Forward and masked backward passes over a ModelGraph.

The activation cache holds exactly what the memory model charges for: full
input activations for trainable standard convs and the classifier, only the
selected channel slices for trainable depthwise convs, and bit-packed ReLU
masks for every ReLU downstream of the backward horizon. Nothing else
survives the forward pass, so tracked cache bytes line up with the planner's
footprint arithmetic.

Backward walks nodes in reverse order starting at the horizon, consuming
cache entries as it goes and accumulating packed per-layer gradients. The
running peak of (remaining cache + accumulated gradients) is recorded so
training can assert it never exceeds the reported footprint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ShapeError
from .graph import INPUT_ID, ModelGraph
from .planner import UpdatePlan

__all__ = ["BlockPruneConfig", "ActivationCache", "ParamGrads", "forward", "backward", "loss_and_grads"]


@dataclass(frozen=True)
class BlockPruneConfig:
    """Activation pruning applied after every ReLU, in training and eval."""

    block: int = 2
    theta: float = 0.15


DEFAULT_BLOCK_PRUNE = BlockPruneConfig()


@dataclass
class ActivationCache:
    """What forward kept alive for backward."""

    saved_inputs: dict[int, np.ndarray] = field(default_factory=dict)
    relu_masks: dict[int, np.ndarray] = field(default_factory=dict)  # packed bits
    relu_shapes: dict[int, tuple[int, ...]] = field(default_factory=dict)
    horizon: int | None = None
    batch: int = 1

    @property
    def nbytes(self) -> int:
        n = sum(a.nbytes for a in self.saved_inputs.values())
        n += sum(a.nbytes for a in self.relu_masks.values())
        return n


@dataclass
class ParamGrads:
    """Packed gradients for one layer: last grad_w axis indexes `selected`."""

    selected: np.ndarray
    grad_w: np.ndarray
    grad_b: np.ndarray

    @property
    def nbytes(self) -> int:
        return self.grad_w.nbytes + self.grad_b.nbytes


def forward(
    model: ModelGraph,
    x: np.ndarray,
    plan: UpdatePlan | None = None,
    act_prune: BlockPruneConfig = DEFAULT_BLOCK_PRUNE,
) -> tuple[np.ndarray, ActivationCache]:
    """Run the graph on a batch (N, H, W, C) -> logits (N, num_classes).

    With plan=None nothing is cached (pure inference). Block activation
    pruning runs either way; evaluation sees the same activations training
    does.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected a batched (N, H, W, C) input, got shape {x.shape}")
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match model {model.input_shape}")
    cache = ActivationCache(horizon=plan.horizon() if plan is not None else None, batch=x.shape[0])
    horizon = cache.horizon

    outputs: dict[int, np.ndarray] = {}

    def value_of(src: int) -> np.ndarray:
        return x if src == INPUT_ID else outputs[src]

    for node in model.nodes:
        a = value_of(node.inputs[0])
        if node.kind == "conv":
            entry = plan.entry(node.id) if plan is not None else None
            if entry is not None and entry.trainable and len(entry.selected) > 0:
                cache.saved_inputs[node.id] = a
            out = ops.conv2d_forward(a, node.kernel, node.bias, node.stride, node.pad)
        elif node.kind == "dwconv":
            entry = plan.entry(node.id) if plan is not None else None
            if entry is not None and entry.trainable and len(entry.selected) > 0:
                cache.saved_inputs[node.id] = np.ascontiguousarray(a[..., entry.selected])
            out = ops.depthwise_forward(a, node.kernel, node.bias, node.stride, node.pad)
        elif node.kind == "linear":
            if plan is not None and plan.classifier_trainable and node.id == plan.classifier_id:
                cache.saved_inputs[node.id] = a
            out = ops.linear_forward(a, node.kernel, node.bias)
        elif node.kind == "relu":
            out, mask = ops.relu_block_prune(a, act_prune.block, act_prune.theta)
            if horizon is not None and node.id > horizon:
                cache.relu_masks[node.id] = np.packbits(mask.ravel())
                cache.relu_shapes[node.id] = mask.shape
        elif node.kind == "gn":
            out = ops.groupnorm_forward_frozen(a, node.gamma, node.beta, node.mean, node.var, node.groups, node.eps)
        elif node.kind == "add":
            out = a + value_of(node.inputs[1])
        elif node.kind == "avgpool":
            out = ops.avgpool_forward(a)
        else:  # flatten
            out = a.reshape(a.shape[0], -1)
        outputs[node.id] = out

    logits = outputs[model.output_id()]
    if not np.all(np.isfinite(logits)):
        raise ShapeError("non-finite logits; model or input is in an error state")
    return logits, cache


@dataclass
class BackwardResult:
    grads: dict[int, ParamGrads]
    peak_tracked_bytes: int


def backward(
    model: ModelGraph,
    cache: ActivationCache,
    grad_logits: np.ndarray,
    plan: UpdatePlan,
) -> BackwardResult:
    """Packed parameter gradients for the plan's trainable layers.

    Gradient flows from the output back to the horizon layer. Input gradients
    use full kernels; weight gradients cover only selected channels and are
    zero outside the weight-mask support. Layers upstream of the horizon are
    never touched.
    """
    horizon = cache.horizon
    grads: dict[int, ParamGrads] = {}
    if horizon is None:
        return BackwardResult(grads, cache.nbytes)

    shapes = model.shapes()
    grad_at: dict[int, np.ndarray] = {model.output_id(): grad_logits}
    grads_bytes = 0
    peak = cache.nbytes

    def send(src: int, g: np.ndarray) -> None:
        if src == INPUT_ID or src < horizon:
            return
        if src in grad_at:
            grad_at[src] = grad_at[src] + g
        else:
            grad_at[src] = g

    for node in reversed(model.nodes):
        if node.id < horizon:
            break
        g = grad_at.pop(node.id, None)
        if g is None:
            continue
        in_shape = model.in_shape(node)
        if node.kind == "conv":
            entry = plan.entry(node.id)
            if entry is not None and entry.trainable and len(entry.selected) > 0:
                a = cache.saved_inputs.pop(node.id)
                gw, gb = ops.conv2d_param_grads(
                    a, g, node.kernel.shape, entry.selected, node.stride, node.pad, node.weight_mask
                )
                grads[node.id] = ParamGrads(entry.selected, gw, gb)
                grads_bytes += grads[node.id].nbytes
            if node.inputs[0] == INPUT_ID or node.inputs[0] >= horizon:
                send(node.inputs[0], ops.conv2d_input_grad(g, node.kernel, (in_shape[0], in_shape[1]), node.stride, node.pad))
        elif node.kind == "dwconv":
            entry = plan.entry(node.id)
            if entry is not None and entry.trainable and len(entry.selected) > 0:
                a_sel = cache.saved_inputs.pop(node.id)
                gw_sel, gb = ops.depthwise_param_grads(
                    a_sel, g, node.kernel.shape, entry.selected, node.stride, node.pad, node.weight_mask
                )
                grads[node.id] = ParamGrads(entry.selected, gw_sel, gb)
                grads_bytes += grads[node.id].nbytes
            if node.inputs[0] == INPUT_ID or node.inputs[0] >= horizon:
                send(node.inputs[0], ops.depthwise_input_grad(g, node.kernel, (in_shape[0], in_shape[1]), node.stride, node.pad))
        elif node.kind == "linear":
            if plan.classifier_trainable and node.id == plan.classifier_id:
                a = cache.saved_inputs.pop(node.id)
                sel = np.arange(node.kernel.shape[1], dtype=np.int64)
                gw, gb = ops.linear_param_grads(a, g, sel, node.weight_mask)
                grads[node.id] = ParamGrads(sel, gw, gb)
                grads_bytes += grads[node.id].nbytes
            send(node.inputs[0], ops.linear_input_grad(g, node.kernel))
        elif node.kind == "relu":
            packed = cache.relu_masks.pop(node.id)
            shape = cache.relu_shapes.pop(node.id)
            mask = np.unpackbits(packed, count=int(np.prod(shape))).reshape(shape).astype(bool)
            send(node.inputs[0], np.where(mask, g, g.dtype.type(0)))
        elif node.kind == "gn":
            send(node.inputs[0], ops.groupnorm_input_grad(g, node.gamma, node.var, node.eps))
        elif node.kind == "add":
            send(node.inputs[0], g)
            send(node.inputs[1], g)
        elif node.kind == "avgpool":
            send(node.inputs[0], ops.avgpool_input_grad(g, (in_shape[0], in_shape[1])))
        else:  # flatten
            send(node.inputs[0], g.reshape((g.shape[0],) + in_shape))
        peak = max(peak, cache.nbytes + grads_bytes)

    return BackwardResult(grads, peak)


def loss_and_grads(
    model: ModelGraph,
    x: np.ndarray,
    label: int,
    plan: UpdatePlan,
    act_prune: BlockPruneConfig = DEFAULT_BLOCK_PRUNE,
) -> tuple[float, dict[int, ParamGrads], int]:
    """One-sample forward + backward. Returns (loss, grads, peak bytes)."""
    if x.shape[0] != 1:
        raise ShapeError(f"loss_and_grads takes one sample at a time, got batch {x.shape[0]}")
    logits, cache = forward(model, x, plan, act_prune)
    loss, grad_vec = ops.cross_entropy_loss(logits[0], label)
    result = backward(model, cache, grad_vec[None, :].astype(logits.dtype), plan)
    return loss, result.grads, result.peak_tracked_bytes
