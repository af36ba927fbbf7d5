"""Versioned binary model container.

Layout (all integers little-endian, all floats IEEE-754 binary32):

    magic      4 bytes  b"SPTR"
    version    u32      currently 1
    H, W, C    u32 x3   model input shape
    classes    u32
    node_count u32

    per node, in topological order:
      id        u32
      kind      u8   1=conv 2=dwconv 3=linear 4=relu 5=gn 6=add 7=avgpool 8=flatten
      n_inputs  u8
      inputs    i32 x n  (-1 refers to the model input)
      conv:    kh,kw,cin,cout,stride,pad u32 x6; kernel f32[kh*kw*cin*cout];
               bias f32[cout]; mask_flag u8; if 1: packbits(mask) bytes
      dwconv:  kh,kw,c,stride,pad u32 x5; kernel f32[kh*kw*c]; bias f32[c];
               mask_flag u8; if 1: packbits(mask) bytes
      linear:  cin,cout u32 x2; weight f32[cin*cout]; bias f32[cout];
               mask_flag u8; if 1: packbits(mask) bytes
      gn:      c,groups u32 x2; eps f32; gamma,beta,mean,var f32[c] each
      others:  no payload

Arrays are C-order flattenings of the shapes named above; masks pack that
same flattening MSB-first (numpy packbits). Writing is a pure function of the
model, so identical models produce identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .graph import LayerNode, ModelGraph

__all__ = ["save_model", "load_model", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"SPTR"
FORMAT_VERSION = 1

_KIND_TAGS = {"conv": 1, "dwconv": 2, "linear": 3, "relu": 4, "gn": 5, "add": 6, "avgpool": 7, "flatten": 8}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _mask_block(mask: np.ndarray | None) -> bytes:
    if mask is None:
        return struct.pack("<B", 0)
    packed = np.packbits(mask.astype(bool).ravel())
    return struct.pack("<B", 1) + packed.tobytes()


def save_model(model: ModelGraph, path: str | Path) -> None:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<IIII", *model.input_shape, model.num_classes)
    out += struct.pack("<I", len(model.nodes))
    for node in model.nodes:
        out += struct.pack("<IB", node.id, _KIND_TAGS[node.kind])
        out += struct.pack("<B", len(node.inputs))
        out += struct.pack(f"<{len(node.inputs)}i", *node.inputs)
        if node.kind == "conv":
            kh, kw, cin, cout = node.kernel.shape
            out += struct.pack("<6I", kh, kw, cin, cout, node.stride, node.pad)
            out += _f32_bytes(node.kernel) + _f32_bytes(node.bias)
            out += _mask_block(node.weight_mask)
        elif node.kind == "dwconv":
            kh, kw, c = node.kernel.shape
            out += struct.pack("<5I", kh, kw, c, node.stride, node.pad)
            out += _f32_bytes(node.kernel) + _f32_bytes(node.bias)
            out += _mask_block(node.weight_mask)
        elif node.kind == "linear":
            cin, cout = node.kernel.shape
            out += struct.pack("<2I", cin, cout)
            out += _f32_bytes(node.kernel) + _f32_bytes(node.bias)
            out += _mask_block(node.weight_mask)
        elif node.kind == "gn":
            c = node.gamma.shape[0]
            out += struct.pack("<2I", c, node.groups)
            out += struct.pack("<f", node.eps)
            for arr in (node.gamma, node.beta, node.mean, node.var):
                out += _f32_bytes(arr)
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.off}, wanted {n} more")
        chunk = self.buf[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).copy()

    def mask(self, shape: tuple[int, ...]) -> np.ndarray | None:
        (flag,) = self.unpack("<B")
        if flag == 0:
            return None
        if flag != 1:
            raise CheckpointError(f"{self.path}: bad mask flag {flag} at byte {self.off - 1}")
        n = int(np.prod(shape))
        packed = np.frombuffer(self.take((n + 7) // 8), dtype=np.uint8)
        return np.unpackbits(packed, count=n).reshape(shape).astype(bool)


def load_model(path: str | Path) -> ModelGraph:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf, str(path))
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    h, w, c, classes = r.unpack("<IIII")
    (count,) = r.unpack("<I")
    nodes: list[LayerNode] = []
    for _ in range(count):
        nid, tag = r.unpack("<IB")
        if tag not in _TAG_KINDS:
            raise CheckpointError(f"{path}: unknown layer tag {tag} for node {nid}")
        kind = _TAG_KINDS[tag]
        (n_in,) = r.unpack("<B")
        inputs = list(r.unpack(f"<{n_in}i"))
        if kind == "conv":
            kh, kw, cin, cout, stride, pad = r.unpack("<6I")
            kernel = r.f32((kh, kw, cin, cout))
            bias = r.f32((cout,))
            mask = r.mask((kh, kw, cin, cout))
            nodes.append(LayerNode(nid, kind, inputs, kernel=kernel, bias=bias, stride=stride, pad=pad, weight_mask=mask))
        elif kind == "dwconv":
            kh, kw, cc, stride, pad = r.unpack("<5I")
            kernel = r.f32((kh, kw, cc))
            bias = r.f32((cc,))
            mask = r.mask((kh, kw, cc))
            nodes.append(LayerNode(nid, kind, inputs, kernel=kernel, bias=bias, stride=stride, pad=pad, weight_mask=mask))
        elif kind == "linear":
            cin, cout = r.unpack("<2I")
            kernel = r.f32((cin, cout))
            bias = r.f32((cout,))
            mask = r.mask((cin, cout))
            nodes.append(LayerNode(nid, kind, inputs, kernel=kernel, bias=bias, weight_mask=mask))
        elif kind == "gn":
            cc, groups = r.unpack("<2I")
            (eps,) = r.unpack("<f")
            gamma, beta, mean, var = (r.f32((cc,)) for _ in range(4))
            nodes.append(LayerNode(nid, kind, inputs, gamma=gamma, beta=beta, mean=mean, var=var, groups=groups, eps=float(eps)))
        else:
            nodes.append(LayerNode(nid, kind, inputs))
    if r.off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.off} trailing bytes after node {count - 1}")
    return ModelGraph(nodes, (h, w, c), classes)
