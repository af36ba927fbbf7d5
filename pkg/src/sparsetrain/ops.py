"""Dense numerical primitives for the layer set.

All image tensors are channels-last: (N, H, W, C). Convolutions are expressed
through `sliding_window_view` patches plus einsum, which keeps forward and
backward in plain numpy while staying fast enough for desk-scale models.

Gradient conventions:
  * weight gradients are computed only for a `selected` subset of output
    channels and returned in packed form (last axis = len(selected)),
  * input gradients always use the full kernel, so gradient flow through a
    partially updated layer is unaffected by the selection,
  * an optional weight mask zeroes gradient entries bitwise, keeping masked
    weights an exact fixed point of SGD.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "conv2d_forward",
    "conv2d_input_grad",
    "conv2d_param_grads",
    "conv2d_param_grads_dense",
    "depthwise_forward",
    "depthwise_input_grad",
    "depthwise_param_grads",
    "linear_forward",
    "linear_input_grad",
    "linear_param_grads",
    "groupnorm_forward_frozen",
    "groupnorm_input_grad",
    "relu_block_prune",
    "avgpool_forward",
    "avgpool_input_grad",
    "cross_entropy_loss",
]


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _patches(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, Ho, Wo, C, kh, kw) view of sliding windows over padded input."""
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ShapeError(
            f"input {x.shape[1]}x{x.shape[2]} smaller than kernel {kh}x{kw}"
        )
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d_out_hw(hw: tuple[int, int], kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    ho = (hw[0] + 2 * pad - kh) // stride + 1
    wo = (hw[1] + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output collapses: input {hw}, kernel {kh}x{kw}, stride {stride}, pad {pad}")
    return ho, wo


def conv2d_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """x (N,H,W,Cin), w (kh,kw,Cin,Cout), bias (Cout,) -> (N,Ho,Wo,Cout)."""
    kh, kw, cin, _ = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv expects {cin} input channels, got {x.shape[3]}")
    pt = _patches(_pad_spatial(x, pad), kh, kw, stride)
    return np.einsum("nijcuv,uvco->nijo", pt, w) + bias


def conv2d_input_grad(grad_out: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int, pad: int) -> np.ndarray:
    """Gradient wrt the conv input, full kernel. grad_out (N,Ho,Wo,Cout)."""
    kh, kw, cin, cout = w.shape
    n, ho, wo, _ = grad_out.shape
    hd = in_hw[0] + 2 * pad - kh + 1
    wd = in_hw[1] + 2 * pad - kw + 1
    gd = np.zeros((n, hd, wd, cout), dtype=grad_out.dtype)
    gd[:, :: stride, :: stride][:, :ho, :wo] = grad_out
    gp = np.pad(gd, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    wf = w[::-1, ::-1]
    pt = _patches(gp, kh, kw, 1)
    gx = np.einsum("nijouv,uvco->nijc", pt, wf)
    return gx[:, pad : pad + in_hw[0], pad : pad + in_hw[1]]


def conv2d_param_grads(
    x: np.ndarray,
    grad_out: np.ndarray,
    kernel_shape: tuple[int, int, int, int],
    selected: np.ndarray,
    stride: int,
    pad: int,
    weight_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Packed kernel/bias gradients for the selected output channels.

    Returns (grad_w (kh,kw,Cin,S), grad_b (S,)) where S = len(selected).
    Entries outside the weight-mask support are exactly zero.
    """
    kh, kw, _, _ = kernel_shape
    pt = _patches(_pad_spatial(x, pad), kh, kw, stride)
    # contiguous gather: full selection then reduces in the same memory order
    # as the dense path, keeping the bit-exact equivalence
    gs = np.ascontiguousarray(grad_out[..., selected])
    gw = np.einsum("nijcuv,nijs->uvcs", pt, gs)
    gb = gs.sum(axis=(0, 1, 2))
    if weight_mask is not None:
        gw = np.where(weight_mask[..., selected], gw, gw.dtype.type(0))
    return gw, gb


def conv2d_param_grads_dense(
    x: np.ndarray, grad_out: np.ndarray, kernel_shape: tuple[int, int, int, int], stride: int, pad: int
) -> tuple[np.ndarray, np.ndarray]:
    """Reference dense gradients with no selection path, for exactness checks."""
    kh, kw, _, _ = kernel_shape
    pt = _patches(_pad_spatial(x, pad), kh, kw, stride)
    gw = np.einsum("nijcuv,nijo->uvco", pt, grad_out)
    gb = grad_out.sum(axis=(0, 1, 2))
    return gw, gb


def depthwise_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """x (N,H,W,C), w (kh,kw,C), bias (C,) -> (N,Ho,Wo,C)."""
    kh, kw, c = w.shape
    if x.shape[3] != c:
        raise ShapeError(f"depthwise expects {c} channels, got {x.shape[3]}")
    pt = _patches(_pad_spatial(x, pad), kh, kw, stride)
    return np.einsum("nijcuv,uvc->nijc", pt, w) + bias


def depthwise_input_grad(grad_out: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int, pad: int) -> np.ndarray:
    kh, kw, c = w.shape
    n, ho, wo, _ = grad_out.shape
    hd = in_hw[0] + 2 * pad - kh + 1
    wd = in_hw[1] + 2 * pad - kw + 1
    gd = np.zeros((n, hd, wd, c), dtype=grad_out.dtype)
    gd[:, :: stride, :: stride][:, :ho, :wo] = grad_out
    gp = np.pad(gd, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    wf = w[::-1, ::-1]
    pt = _patches(gp, kh, kw, 1)
    gx = np.einsum("nijcuv,uvc->nijc", pt, wf)
    return gx[:, pad : pad + in_hw[0], pad : pad + in_hw[1]]


def depthwise_param_grads(
    x_selected: np.ndarray,
    grad_out: np.ndarray,
    kernel_shape: tuple[int, int, int],
    selected: np.ndarray,
    stride: int,
    pad: int,
    weight_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Packed gradients from the stored selected-channel input slices.

    x_selected holds only the selected channels, in `selected` order.
    Returns (grad_w (kh,kw,S), grad_b (S,)).
    """
    kh, kw, _ = kernel_shape
    if x_selected.shape[3] != len(selected):
        raise ShapeError("stored depthwise slice count does not match selection")
    pt = _patches(_pad_spatial(x_selected, pad), kh, kw, stride)
    gs = np.ascontiguousarray(grad_out[..., selected])
    gw = np.einsum("nijsuv,nijs->uvs", pt, gs)
    gb = gs.sum(axis=(0, 1, 2))
    if weight_mask is not None:
        gw = np.where(weight_mask[..., selected], gw, gw.dtype.type(0))
    return gw, gb


def linear_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x (N,Cin), w (Cin,Cout) -> (N,Cout)."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear expects {w.shape[0]} inputs, got {x.shape[1]}")
    return x @ w + bias


def linear_input_grad(grad_out: np.ndarray, w: np.ndarray) -> np.ndarray:
    return grad_out @ w.T


def linear_param_grads(
    x: np.ndarray,
    grad_out: np.ndarray,
    selected: np.ndarray,
    weight_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Packed (grad_w (Cin,S), grad_b (S,)) for selected output units."""
    gs = np.ascontiguousarray(grad_out[:, selected])
    gw = x.T @ gs
    gb = gs.sum(axis=0)
    if weight_mask is not None:
        gw = np.where(weight_mask[:, selected], gw, gw.dtype.type(0))
    return gw, gb


def groupnorm_forward_frozen(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    groups: int,
    eps: float = 1e-5,
) -> np.ndarray:
    """Normalization with frozen per-channel statistics.

    With mean/var fixed this is a per-channel affine map; `groups` only
    constrains the channel count (the stored statistics already encode the
    grouping used when they were estimated).
    """
    c = x.shape[-1]
    if c % groups != 0:
        raise ShapeError(f"channel count {c} not divisible by {groups} groups")
    scale = gamma / np.sqrt(var + eps)
    return x * scale + (beta - mean * scale)


def groupnorm_input_grad(grad_out: np.ndarray, gamma: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    return grad_out * (gamma / np.sqrt(var + eps))


def relu_block_prune(x: np.ndarray, block: int = 2, theta: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """ReLU followed by block-granular activation pruning.

    Blocks of `block` consecutive elements tile the innermost axis; a short
    final block stands on its own. A block is zeroed iff every post-ReLU
    element in it falls below `theta`. Returns (y, mask) where mask marks the
    positions through which gradient may flow (equivalently y > 0).
    """
    if block < 1:
        raise ValueError(f"block size must be >= 1, got {block}")
    y = np.maximum(x, x.dtype.type(0))
    c = y.shape[-1]
    main = c - c % block
    keep = np.empty(y.shape, dtype=bool)
    if main:
        head = y[..., :main].reshape(y.shape[:-1] + (main // block, block))
        keep_head = head.max(axis=-1) >= theta
        keep[..., :main] = np.repeat(keep_head, block, axis=-1)
    if main < c:
        keep[..., main:] = y[..., main:].max(axis=-1, keepdims=True) >= theta
    y = np.where(keep, y, y.dtype.type(0))
    return y, y > 0


def avgpool_forward(x: np.ndarray) -> np.ndarray:
    """Global average pool (N,H,W,C) -> (N,1,1,C)."""
    return x.mean(axis=(1, 2), keepdims=True)


def avgpool_input_grad(grad_out: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
    h, w = in_hw
    scale = grad_out.dtype.type(1.0 / (h * w))
    return np.broadcast_to(grad_out * scale, (grad_out.shape[0], h, w, grad_out.shape[3])).copy()


def cross_entropy_loss(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Numerically stable cross entropy for one sample.

    logits is a 1-D class-score vector. Returns (loss, grad wrt logits).
    """
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy_loss expects a 1-D logit vector, got shape {logits.shape}")
    if not (0 <= label < logits.shape[0]):
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    lse = np.log(np.exp(z).sum())
    loss = float(lse - z[label])
    grad = np.exp(z - lse)
    grad[label] -= 1.0
    return loss, grad
