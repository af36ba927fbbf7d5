"""Shared test helpers: independent oracles and small model builders.

The loop_* functions are deliberately naive nested-loop implementations,
written without reference to the library's einsum kernels, so they can serve
as ground truth. Finite differences run in f64 with central steps.
"""

from __future__ import annotations

import numpy as np

from sparsetrain.graph import INPUT_ID, LayerNode, ModelGraph, gn_groups_for
from sparsetrain.planner import PlanEntry, UpdatePlan

FD_H = 1e-5


# --------------------------------------------------------------------------
# direct-loop references


def loop_conv2d(x, w, bias, stride=1, pad=0):
    """Six-nested-loop convolution, channels-last."""
    n, h, wi, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.zeros((n, h + 2 * pad, wi + 2 * pad, cin), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + wi] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wi + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            for c in range(cin):
                                acc += xp[b, i * stride + u, j * stride + v, c] * w[u, v, c, o]
                    out[b, i, j, o] = acc + bias[o]
    return out


def loop_depthwise(x, w, bias, stride=1, pad=0):
    n, h, wi, c = x.shape
    kh, kw, _ = w.shape
    xp = np.zeros((n, h + 2 * pad, wi + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + wi] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wi + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, c), dtype=x.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[b, i * stride + u, j * stride + v, ch] * w[u, v, ch]
                    out[b, i, j, ch] = acc + bias[ch]
    return out


def loop_linear(x, w, bias):
    n, cin = x.shape
    cout = w.shape[1]
    out = np.zeros((n, cout), dtype=x.dtype)
    for b in range(n):
        for o in range(cout):
            acc = 0.0
            for c in range(cin):
                acc += x[b, c] * w[c, o]
            out[b, o] = acc + bias[o]
    return out


# --------------------------------------------------------------------------
# finite differences


def central_diff(f, arr, idx, h=FD_H):
    """d f / d arr[idx] by central difference; arr is mutated and restored."""
    orig = arr[idx]
    arr[idx] = orig + h
    fp = f()
    arr[idx] = orig - h
    fm = f()
    arr[idx] = orig
    return (fp - fm) / (2.0 * h)


def rel_err(got, want):
    return abs(got - want) / max(abs(want), 1e-9)


def probe_indices(rng, grad, count):
    """Indices to probe: the largest-|grad| entries plus random extras."""
    flat = np.argsort(-np.abs(grad).ravel())
    picks = list(flat[: max(1, count // 2)])
    picks += list(rng.choice(grad.size, size=count - len(picks), replace=False))
    return [np.unravel_index(int(p), grad.shape) for p in picks]


# --------------------------------------------------------------------------
# model builders


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class GraphBuilder:
    """Minimal node-list builder for hand-assembled test graphs."""

    def __init__(self, rng):
        self.rng = rng
        self.nodes: list[LayerNode] = []

    def _push(self, node):
        self.nodes.append(node)
        return node.id

    def conv(self, src, kh, cin, cout, stride=1, pad=None):
        pad = kh // 2 if pad is None else pad
        return self._push(
            LayerNode(
                len(self.nodes),
                "conv",
                [src],
                kernel=_he(self.rng, (kh, kh, cin, cout), kh * kh * cin),
                bias=self.rng.normal(0.0, 0.05, cout).astype(np.float32),
                stride=stride,
                pad=pad,
            )
        )

    def dwconv(self, src, kh, c, stride=1, pad=None):
        pad = kh // 2 if pad is None else pad
        return self._push(
            LayerNode(
                len(self.nodes),
                "dwconv",
                [src],
                kernel=_he(self.rng, (kh, kh, c), kh * kh),
                bias=self.rng.normal(0.0, 0.05, c).astype(np.float32),
                stride=stride,
                pad=pad,
            )
        )

    def linear(self, src, cin, cout):
        return self._push(
            LayerNode(
                len(self.nodes),
                "linear",
                [src],
                kernel=_he(self.rng, (cin, cout), cin),
                bias=self.rng.normal(0.0, 0.05, cout).astype(np.float32),
            )
        )

    def gn(self, src, c):
        return self._push(
            LayerNode(
                len(self.nodes),
                "gn",
                [src],
                gamma=(1.0 + 0.1 * self.rng.normal(size=c)).astype(np.float32),
                beta=(0.1 * self.rng.normal(size=c)).astype(np.float32),
                mean=(0.05 * self.rng.normal(size=c)).astype(np.float32),
                var=(1.0 + 0.2 * self.rng.uniform(size=c)).astype(np.float32),
                groups=gn_groups_for(c),
            )
        )

    def relu(self, src):
        return self._push(LayerNode(len(self.nodes), "relu", [src]))

    def add(self, a, b):
        return self._push(LayerNode(len(self.nodes), "add", [a, b]))

    def avgpool(self, src):
        return self._push(LayerNode(len(self.nodes), "avgpool", [src]))

    def flatten(self, src):
        return self._push(LayerNode(len(self.nodes), "flatten", [src]))


def chain_model(rng, input_hw=8, num_classes=3, n_blocks=None, with_masks=False):
    """Random small network touching every layer kind.

    Blocks are drawn from {conv, dwconv, residual}; the head is a 1x1 conv,
    pool, flatten, classifier. With with_masks, some conv kernels get random
    masks with the masked weights zeroed (the library invariant).
    """
    b = GraphBuilder(rng)
    channels = int(rng.choice([4, 6, 8]))
    x = b.conv(INPUT_ID, 3, 3, channels)
    x = b.gn(x, channels)
    x = b.relu(x)
    n_blocks = int(rng.integers(1, 4)) if n_blocks is None else n_blocks
    for _ in range(n_blocks):
        kind = rng.choice(["conv", "dw", "res"])
        if kind == "conv":
            nxt = int(rng.choice([4, 6, 8]))
            x = b.conv(x, 3, channels, nxt)
            channels = nxt
            x = b.gn(x, channels)
            x = b.relu(x)
        elif kind == "dw":
            x = b.dwconv(x, 3, channels)
            x = b.gn(x, channels)
            x = b.relu(x)
        else:
            skip = x
            x = b.conv(x, 3, channels, channels)
            x = b.gn(x, channels)
            x = b.add(x, skip)
            x = b.relu(x)
    head = int(rng.choice([6, 8]))
    x = b.conv(x, 1, channels, head, pad=0)
    x = b.relu(x)
    x = b.avgpool(x)
    x = b.flatten(x)
    b.linear(x, head, num_classes)
    model = ModelGraph(b.nodes, (input_hw, input_hw, 3), num_classes)
    if with_masks:
        for node in model.nodes:
            if node.kind == "conv" and rng.random() < 0.6:
                mask = rng.random(node.kernel.shape) < 0.7
                node.weight_mask = mask
                node.kernel = np.where(mask, node.kernel, np.float32(0))
    return model


def random_plan(rng, model):
    """Arbitrary valid plan: random trainable flags and channel subsets."""
    entries = {}
    for nid in model.conv_ids():
        node = model.node(nid)
        c = node.out_channels()
        if rng.random() < 0.5:
            s = int(rng.integers(1, c + 1))
            sel = np.sort(rng.choice(c, size=s, replace=False)).astype(np.int64)
            entries[nid] = PlanEntry(True, sel, s / c)
        else:
            entries[nid] = PlanEntry(False, np.empty(0, dtype=np.int64), 0.0)
    classifier = model.classifier_id()
    return UpdatePlan(entries, classifier, bool(rng.random() < 0.8))


def model_input(rng, model, batch=1):
    return rng.normal(0.0, 1.0, size=(batch,) + model.input_shape).astype(np.float32)


# --------------------------------------------------------------------------
# whole-graph oracles


def _block_prune_naive(x, block, theta):
    """Per-block python loop over the innermost axis; independent of ops."""
    y = np.maximum(x, 0.0)
    flat = y.reshape(-1, y.shape[-1])
    for row in flat:
        for lo in range(0, row.size, block):
            blk = row[lo : lo + block]
            if all(v < theta for v in blk):
                blk[:] = 0.0
    return y


def loop_forward(model, x, block=2, theta=0.15):
    """Graph replay on the direct-loop primitives, f64 end to end."""
    x = x.astype(np.float64)
    outs = {}

    def val(src):
        return x if src == INPUT_ID else outs[src]

    for node in model.nodes:
        a = val(node.inputs[0])
        if node.kind == "conv":
            out = loop_conv2d(a, node.kernel.astype(np.float64), node.bias.astype(np.float64), node.stride, node.pad)
        elif node.kind == "dwconv":
            out = loop_depthwise(a, node.kernel.astype(np.float64), node.bias.astype(np.float64), node.stride, node.pad)
        elif node.kind == "linear":
            out = loop_linear(a, node.kernel.astype(np.float64), node.bias.astype(np.float64))
        elif node.kind == "relu":
            out = _block_prune_naive(a, block, theta)
        elif node.kind == "gn":
            scale = node.gamma.astype(np.float64) / np.sqrt(node.var.astype(np.float64) + node.eps)
            out = a * scale + (node.beta.astype(np.float64) - node.mean.astype(np.float64) * scale)
        elif node.kind == "add":
            out = a + val(node.inputs[1])
        elif node.kind == "avgpool":
            out = a.mean(axis=(1, 2), keepdims=True)
        else:  # flatten
            out = a.reshape(a.shape[0], -1)
        outs[node.id] = out
    return outs[model.output_id()]


def relu_margin(model, x, block=2, theta=0.15):
    """Smallest distance of any ReLU decision to its boundary.

    Finite differences on the loss are only valid when no element sign and no
    block keep/drop decision can flip under a tiny parameter nudge; callers
    resample instances whose margin is too small.
    """
    from sparsetrain import ops

    outs = {}
    margin = np.inf

    def val(src):
        return x if src == INPUT_ID else outs[src]

    for node in model.nodes:
        a = val(node.inputs[0])
        if node.kind == "conv":
            out = ops.conv2d_forward(a, node.kernel, node.bias, node.stride, node.pad)
        elif node.kind == "dwconv":
            out = ops.depthwise_forward(a, node.kernel, node.bias, node.stride, node.pad)
        elif node.kind == "linear":
            out = ops.linear_forward(a, node.kernel, node.bias)
        elif node.kind == "relu":
            nz = a[a != 0]
            if nz.size:
                margin = min(margin, float(np.abs(nz).min()))
            y = np.maximum(a, 0.0)
            c = y.shape[-1]
            main = c - c % block
            if main:
                bm = y[..., :main].reshape(y.shape[:-1] + (main // block, block)).max(axis=-1)
                margin = min(margin, float(np.abs(bm - theta).min()))
            if main < c:
                bm = y[..., main:].max(axis=-1)
                margin = min(margin, float(np.abs(bm - theta).min()))
            out, _ = ops.relu_block_prune(a, block, theta)
        elif node.kind == "gn":
            out = ops.groupnorm_forward_frozen(a, node.gamma, node.beta, node.mean, node.var, node.groups, node.eps)
        elif node.kind == "add":
            out = a + val(node.inputs[1])
        elif node.kind == "avgpool":
            out = ops.avgpool_forward(a)
        else:
            out = a.reshape(a.shape[0], -1)
        outs[node.id] = out
    return margin


def dense_backward_reference(model, x, label, block=2, theta=0.15):
    """Full-plan backward replay with the dense gradient path.

    Mirrors the engine's traversal and accumulation order exactly but uses
    conv2d_param_grads_dense and unsliced inputs, so a bit-exact comparison
    against the packed full-selection gradients is meaningful.
    """
    from sparsetrain import ops

    outs = {}
    relu_masks = {}

    def val(src):
        return x if src == INPUT_ID else outs[src]

    for node in model.nodes:
        a = val(node.inputs[0])
        if node.kind == "conv":
            out = ops.conv2d_forward(a, node.kernel, node.bias, node.stride, node.pad)
        elif node.kind == "dwconv":
            out = ops.depthwise_forward(a, node.kernel, node.bias, node.stride, node.pad)
        elif node.kind == "linear":
            out = ops.linear_forward(a, node.kernel, node.bias)
        elif node.kind == "relu":
            out, mask = ops.relu_block_prune(a, block, theta)
            relu_masks[node.id] = mask
        elif node.kind == "gn":
            out = ops.groupnorm_forward_frozen(a, node.gamma, node.beta, node.mean, node.var, node.groups, node.eps)
        elif node.kind == "add":
            out = a + val(node.inputs[1])
        elif node.kind == "avgpool":
            out = ops.avgpool_forward(a)
        else:
            out = a.reshape(a.shape[0], -1)
        outs[node.id] = out

    logits = outs[model.output_id()]
    loss, grad_vec = ops.cross_entropy_loss(logits[0], label)
    grad_at = {model.output_id(): grad_vec[None, :].astype(logits.dtype)}
    grads = {}

    def send(src, g):
        if src == INPUT_ID:
            return
        grad_at[src] = grad_at[src] + g if src in grad_at else g

    for node in reversed(model.nodes):
        g = grad_at.pop(node.id, None)
        if g is None:
            continue
        a = val(node.inputs[0])
        in_shape = model.in_shape(node)
        if node.kind == "conv":
            gw, gb = ops.conv2d_param_grads_dense(a, g, node.kernel.shape, node.stride, node.pad)
            if node.weight_mask is not None:
                gw = np.where(node.weight_mask, gw, gw.dtype.type(0))
            grads[node.id] = (gw, gb)
            send(node.inputs[0], ops.conv2d_input_grad(g, node.kernel, (in_shape[0], in_shape[1]), node.stride, node.pad))
        elif node.kind == "dwconv":
            sel = np.arange(node.kernel.shape[2], dtype=np.int64)
            gw, gb = ops.depthwise_param_grads(np.ascontiguousarray(a), g, node.kernel.shape, sel, node.stride, node.pad, node.weight_mask)
            grads[node.id] = (gw, gb)
            send(node.inputs[0], ops.depthwise_input_grad(g, node.kernel, (in_shape[0], in_shape[1]), node.stride, node.pad))
        elif node.kind == "linear":
            gw = a.T @ g
            if node.weight_mask is not None:
                gw = np.where(node.weight_mask, gw, gw.dtype.type(0))
            grads[node.id] = (gw, g.sum(axis=0))
            send(node.inputs[0], ops.linear_input_grad(g, node.kernel))
        elif node.kind == "relu":
            send(node.inputs[0], np.where(relu_masks[node.id], g, g.dtype.type(0)))
        elif node.kind == "gn":
            send(node.inputs[0], ops.groupnorm_input_grad(g, node.gamma, node.var, node.eps))
        elif node.kind == "add":
            send(node.inputs[0], g)
            send(node.inputs[1], g)
        elif node.kind == "avgpool":
            send(node.inputs[0], ops.avgpool_input_grad(g, (in_shape[0], in_shape[1])))
        else:
            send(node.inputs[0], g.reshape((g.shape[0],) + in_shape))
    return loss, grads
