"""Reference graph builders.

`toy_cnn` is the desk-scale workhorse for experiments and tests. `mobilenet_v2`
reproduces the standard inverted-residual layout (width 1.0) so budget plans
can be computed against realistic layer dimensions without ever running a
forward pass at that scale.

Weights are He-normal from a named substream of the given seed; biases start
at zero; normalization statistics start at identity (mean 0, var 1) and stay
frozen for the lifetime of the model.
"""

from __future__ import annotations

import numpy as np

from .graph import INPUT_ID, LayerNode, ModelGraph, gn_groups_for
from .seeding import substream

__all__ = ["toy_cnn", "mobilenet_v2"]


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes: list[LayerNode] = []

    def _add(self, node: LayerNode) -> int:
        self.nodes.append(node)
        return node.id

    def conv(self, src: int, kh: int, kw: int, cin: int, cout: int, stride: int = 1, pad: int = 0) -> int:
        fan_in = kh * kw * cin
        kernel = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kh, kw, cin, cout)).astype(np.float32)
        bias = np.zeros(cout, dtype=np.float32)
        return self._add(LayerNode(len(self.nodes), "conv", [src], kernel=kernel, bias=bias, stride=stride, pad=pad))

    def dwconv(self, src: int, kh: int, kw: int, c: int, stride: int = 1, pad: int = 0) -> int:
        kernel = self.rng.normal(0.0, np.sqrt(2.0 / (kh * kw)), size=(kh, kw, c)).astype(np.float32)
        bias = np.zeros(c, dtype=np.float32)
        return self._add(LayerNode(len(self.nodes), "dwconv", [src], kernel=kernel, bias=bias, stride=stride, pad=pad))

    def linear(self, src: int, cin: int, cout: int) -> int:
        weight = self.rng.normal(0.0, np.sqrt(2.0 / cin), size=(cin, cout)).astype(np.float32)
        bias = np.zeros(cout, dtype=np.float32)
        return self._add(LayerNode(len(self.nodes), "linear", [src], kernel=weight, bias=bias))

    def gn(self, src: int, c: int) -> int:
        return self._add(
            LayerNode(
                len(self.nodes),
                "gn",
                [src],
                gamma=np.ones(c, dtype=np.float32),
                beta=np.zeros(c, dtype=np.float32),
                mean=np.zeros(c, dtype=np.float32),
                var=np.ones(c, dtype=np.float32),
                groups=gn_groups_for(c),
            )
        )

    def relu(self, src: int) -> int:
        return self._add(LayerNode(len(self.nodes), "relu", [src]))

    def add(self, a: int, b: int) -> int:
        return self._add(LayerNode(len(self.nodes), "add", [a, b]))

    def avgpool(self, src: int) -> int:
        return self._add(LayerNode(len(self.nodes), "avgpool", [src]))

    def flatten(self, src: int) -> int:
        return self._add(LayerNode(len(self.nodes), "flatten", [src]))


def toy_cnn(num_classes: int = 4, input_hw: int = 16, seed: int = 0) -> ModelGraph:
    """Six-conv CNN with normalization, one residual block, and a classifier."""
    b = _Builder(substream(seed, "model-init"))
    x = b.conv(INPUT_ID, 3, 3, 3, 8, stride=1, pad=1)
    x = b.gn(x, 8)
    x = b.relu(x)
    x = b.conv(x, 3, 3, 8, 16, stride=2, pad=1)
    x = b.gn(x, 16)
    skip = b.relu(x)
    x = b.conv(skip, 3, 3, 16, 16, stride=1, pad=1)
    x = b.gn(x, 16)
    x = b.add(x, skip)
    x = b.relu(x)
    x = b.conv(x, 3, 3, 16, 24, stride=2, pad=1)
    x = b.gn(x, 24)
    x = b.relu(x)
    x = b.conv(x, 3, 3, 24, 24, stride=1, pad=1)
    x = b.gn(x, 24)
    x = b.relu(x)
    x = b.conv(x, 1, 1, 24, 32)
    x = b.gn(x, 32)
    x = b.relu(x)
    x = b.avgpool(x)
    x = b.flatten(x)
    b.linear(x, 32, num_classes)
    return ModelGraph(b.nodes, (input_hw, input_hw, 3), num_classes)


_MBV2_BLOCKS = [
    # (expansion, out_channels, repeats, first_stride)
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]


def mobilenet_v2(num_classes: int = 10, input_hw: int = 224, width_mult: float = 1.0, seed: int = 0) -> ModelGraph:
    """Inverted-residual network, standard widths at multiplier 1.0.

    52 conv nodes plus the classifier. Residual adds appear wherever stride
    is 1 and the block preserves its channel count.
    """

    def scale(c: int) -> int:
        return max(8, int(round(c * width_mult / 8) * 8)) if width_mult != 1.0 else c

    b = _Builder(substream(seed, "model-init"))
    cin = scale(32)
    x = b.conv(INPUT_ID, 3, 3, 3, cin, stride=2, pad=1)
    x = b.gn(x, cin)
    x = b.relu(x)
    for expansion, cout, repeats, first_stride in _MBV2_BLOCKS:
        cout = scale(cout)
        for rep in range(repeats):
            stride = first_stride if rep == 0 else 1
            block_in = x
            hidden = cin * expansion
            if expansion != 1:
                x = b.conv(x, 1, 1, cin, hidden)
                x = b.gn(x, hidden)
                x = b.relu(x)
            x = b.dwconv(x, 3, 3, hidden, stride=stride, pad=1)
            x = b.gn(x, hidden)
            x = b.relu(x)
            x = b.conv(x, 1, 1, hidden, cout)
            x = b.gn(x, cout)
            if stride == 1 and cin == cout:
                x = b.add(x, block_in)
            cin = cout
    head = scale(1280) if width_mult > 1.0 else 1280
    x = b.conv(x, 1, 1, cin, head)
    x = b.gn(x, head)
    x = b.relu(x)
    x = b.avgpool(x)
    x = b.flatten(x)
    b.linear(x, head, num_classes)
    return ModelGraph(b.nodes, (input_hw, input_hw, 3), num_classes)
