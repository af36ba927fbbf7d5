"""Dense primitives against direct-loop and finite-difference oracles."""

import math

import numpy as np
import pytest

from sparsetrain import ops
from sparsetrain.errors import ShapeError

from conftest import FD_H, central_diff, loop_conv2d, loop_depthwise, loop_linear, probe_indices, rel_err


# --------------------------------------------------------------------------
# forward vs direct loops


def test_conv_identity_1x1_kernel():
    x = np.array([[[[2.0]]]], dtype=np.float32)
    w = np.ones((1, 1, 1, 1), dtype=np.float32)
    out = ops.conv2d_forward(x, w, np.zeros(1, dtype=np.float32))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 2.0


def test_conv_all_ones_sums_window():
    x = np.ones((1, 3, 3, 1), dtype=np.float32)
    w = np.ones((3, 3, 1, 1), dtype=np.float32)
    out = ops.conv2d_forward(x, w, np.zeros(1, dtype=np.float32))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_forward_matches_loop_f64():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    got = ops.conv2d_forward(x, w, b)
    want = loop_conv2d(x, w, b)
    np.testing.assert_array_equal(got, want)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_forward_strides_pads(stride, pad):
    rng = np.random.default_rng(100 + stride * 10 + pad)
    x = rng.normal(size=(2, 7, 6, 3))
    w = rng.normal(size=(3, 3, 3, 5))
    b = rng.normal(size=5)
    got = ops.conv2d_forward(x, w, b, stride, pad)
    want = loop_conv2d(x, w, b, stride, pad)
    assert np.allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_depthwise_forward_matches_loop(stride, pad):
    rng = np.random.default_rng(200 + stride * 10 + pad)
    x = rng.normal(size=(2, 6, 6, 4))
    w = rng.normal(size=(3, 3, 4))
    b = rng.normal(size=4)
    got = ops.depthwise_forward(x, w, b, stride, pad)
    want = loop_depthwise(x, w, b, stride, pad)
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_linear_forward_matches_loop():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 6))
    w = rng.normal(size=(6, 4))
    b = rng.normal(size=4)
    np.testing.assert_allclose(ops.linear_forward(x, w, b), loop_linear(x, w, b), atol=1e-12, rtol=0)


def test_conv_shape_errors():
    x = np.zeros((1, 4, 4, 2), dtype=np.float32)
    w = np.zeros((3, 3, 3, 4), dtype=np.float32)
    with pytest.raises(ShapeError):
        ops.conv2d_forward(x, w, np.zeros(4, dtype=np.float32))
    with pytest.raises(ShapeError):
        ops.conv2d_out_hw((2, 2), 3, 3, 1, 0)
    with pytest.raises(ShapeError):
        ops.conv2d_forward(np.zeros((1, 2, 2, 3), dtype=np.float32), w, np.zeros(4, dtype=np.float32))


# --------------------------------------------------------------------------
# gradients vs finite differences (f64)


def _fd_check(f, arr, analytic, rng, n_probes=4, tol=1e-4):
    for idx in probe_indices(rng, analytic, n_probes):
        fd = central_diff(f, arr, idx)
        assert rel_err(analytic[idx], fd) <= tol, (idx, analytic[idx], fd)


def test_conv_grads_match_fd():
    rng = np.random.default_rng(21)
    for trial in range(8):
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = rng.normal(size=(1, 5, 5, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        r = rng.normal(size=ops.conv2d_forward(x, w, b, stride, pad).shape)

        def loss():
            return float((ops.conv2d_forward(x, w, b, stride, pad) * r).sum())

        sel = np.arange(3, dtype=np.int64)
        gw, gb = ops.conv2d_param_grads(x, r, w.shape, sel, stride, pad)
        gx = ops.conv2d_input_grad(r, w, (5, 5), stride, pad)
        _fd_check(loss, w, gw, rng)
        _fd_check(loss, b, gb, rng, n_probes=2)
        _fd_check(loss, x, gx, rng)


def test_conv_selected_rows_match_fd_and_others_absent():
    rng = np.random.default_rng(22)
    x = rng.normal(size=(1, 4, 4, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    r = rng.normal(size=(1, 2, 2, 4))
    sel = np.array([1, 3], dtype=np.int64)
    gw, gb = ops.conv2d_param_grads(x, r, w.shape, sel, 1, 0)
    assert gw.shape == (3, 3, 2, 2)
    assert gb.shape == (2,)

    def loss():
        return float((ops.conv2d_forward(x, w, b, 1, 0) * r).sum())

    for k, o in enumerate(sel):
        for idx in probe_indices(rng, gw[..., k], 3):
            fd = central_diff(loss, w, idx + (int(o),))
            assert rel_err(gw[..., k][idx], fd) <= 1e-4


def test_conv_full_selection_bitwise_equals_dense():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(2, 5, 5, 3)).astype(np.float32)
    w = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
    r = rng.normal(size=(2, 3, 3, 4)).astype(np.float32)
    sel = np.arange(4, dtype=np.int64)
    gw, gb = ops.conv2d_param_grads(x, r, w.shape, sel, 1, 0)
    dw, db = ops.conv2d_param_grads_dense(x, r, w.shape, 1, 0)
    assert np.array_equal(gw, dw)
    assert np.array_equal(gb, db)


def test_conv_mask_zeroes_grads_bitwise():
    rng = np.random.default_rng(24)
    x = rng.normal(size=(1, 4, 4, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 2, 4)).astype(np.float32)
    mask = rng.random((3, 3, 2, 4)) < 0.5
    r = rng.normal(size=(1, 2, 2, 4)).astype(np.float32)
    sel = np.array([0, 2], dtype=np.int64)
    gw, _ = ops.conv2d_param_grads(x, r, w.shape, sel, 1, 0, weight_mask=mask)
    outside = gw[~mask[..., sel]]
    assert outside.size > 0
    assert np.all(outside == 0.0)


def test_depthwise_grads_match_fd():
    rng = np.random.default_rng(25)
    for trial in range(6):
        stride = int(rng.integers(1, 3))
        x = rng.normal(size=(1, 5, 5, 3))
        w = rng.normal(size=(3, 3, 3))
        b = rng.normal(size=3)
        r = rng.normal(size=ops.depthwise_forward(x, w, b, stride, 1).shape)
        sel = np.array([0, 2], dtype=np.int64)

        def loss():
            return float((ops.depthwise_forward(x, w, b, stride, 1) * r).sum())

        x_sel = np.ascontiguousarray(x[..., sel])
        gw, gb = ops.depthwise_param_grads(x_sel, r, w.shape, sel, stride, 1)
        assert gw.shape == (3, 3, 2)
        for k, ch in enumerate(sel):
            for idx in probe_indices(rng, gw[..., k], 3):
                fd = central_diff(loss, w, idx + (int(ch),))
                assert rel_err(gw[..., k][idx], fd) <= 1e-4
            fd = central_diff(loss, b, (int(ch),))
            assert rel_err(gb[k], fd) <= 1e-4
        gx = ops.depthwise_input_grad(r, w, (5, 5), stride, 1)
        _fd_check(loss, x, gx, rng)


def test_depthwise_slice_count_mismatch():
    x_sel = np.zeros((1, 4, 4, 3), dtype=np.float32)
    with pytest.raises(ShapeError):
        ops.depthwise_param_grads(x_sel, np.zeros((1, 2, 2, 4), dtype=np.float32), (3, 3, 4), np.array([0, 1]), 1, 0)


def test_linear_grads_match_fd():
    rng = np.random.default_rng(26)
    x = rng.normal(size=(2, 5))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    r = rng.normal(size=(2, 4))
    sel = np.arange(4, dtype=np.int64)

    def loss():
        return float((ops.linear_forward(x, w, b) * r).sum())

    gw, gb = ops.linear_param_grads(x, r, sel)
    gx = ops.linear_input_grad(r, w)
    _fd_check(loss, w, gw, rng)
    _fd_check(loss, b, gb, rng, n_probes=2)
    _fd_check(loss, x, gx, rng)


# --------------------------------------------------------------------------
# group normalization (frozen)


def test_gn_identity_statistics():
    rng = np.random.default_rng(30)
    x = rng.normal(size=(1, 3, 3, 4)).astype(np.float32)
    c = np.ones(4, dtype=np.float32)
    z = np.zeros(4, dtype=np.float32)
    y = ops.groupnorm_forward_frozen(x, c, z, z, c, groups=4, eps=0.0)
    assert np.allclose(y, x, atol=1e-7)


def test_gn_constant_input_gives_beta():
    mu = np.array([0.5, -1.0], dtype=np.float32)
    beta = np.array([3.0, 4.0], dtype=np.float32)
    x = np.broadcast_to(mu, (1, 2, 2, 2)).copy()
    y = ops.groupnorm_forward_frozen(x, np.ones(2, dtype=np.float32), beta, mu, np.ones(2, dtype=np.float32), 2)
    assert np.allclose(y, np.broadcast_to(beta, y.shape), atol=1e-6)


def test_gn_backward_is_affine_scale_and_matches_fd():
    rng = np.random.default_rng(31)
    x = rng.normal(size=(1, 3, 3, 4))
    gamma = 1.0 + 0.3 * rng.normal(size=4)
    beta = rng.normal(size=4)
    mean = rng.normal(size=4)
    var = 1.0 + rng.uniform(size=4)
    r = rng.normal(size=x.shape)

    def loss():
        return float((ops.groupnorm_forward_frozen(x, gamma, beta, mean, var, 4) * r).sum())

    gx = ops.groupnorm_input_grad(r, gamma, var)
    assert np.allclose(gx, r * (gamma / np.sqrt(var + 1e-5)), atol=1e-12)
    _fd_check(loss, x, gx, rng)


def test_gn_group_mismatch():
    x = np.zeros((1, 2, 2, 6), dtype=np.float32)
    p = np.ones(6, dtype=np.float32)
    with pytest.raises(ShapeError):
        ops.groupnorm_forward_frozen(x, p, p, p, p, groups=4)


# --------------------------------------------------------------------------
# block activation pruning


def test_block_prune_low_pair_zeroed():
    x = np.array([[0.10, 0.12]], dtype=np.float32)
    y, mask = ops.relu_block_prune(x, block=2, theta=0.15)
    assert np.array_equal(y, np.zeros_like(x))
    assert not mask.any()


def test_block_prune_mixed_pair_kept():
    x = np.array([[0.10, 0.20]], dtype=np.float32)
    y, mask = ops.relu_block_prune(x, block=2, theta=0.15)
    assert np.array_equal(y, x)
    assert mask.all()


def test_block_prune_theta_zero_is_plain_relu():
    rng = np.random.default_rng(40)
    x = rng.normal(size=(2, 3, 3, 5)).astype(np.float32)
    y, mask = ops.relu_block_prune(x, block=2, theta=0.0)
    assert np.array_equal(y, np.maximum(x, 0))
    assert np.array_equal(mask, y > 0)


def test_block_prune_all_or_nothing_with_odd_tail():
    rng = np.random.default_rng(41)
    x = rng.uniform(-0.5, 0.5, size=(4, 7)).astype(np.float32)  # 7: 3 pairs + tail of 1
    y, mask = ops.relu_block_prune(x, block=2, theta=0.15)
    relu = np.maximum(x, 0)
    for row in range(4):
        for lo in (0, 2, 4, 6):
            hi = min(lo + 2, 7)
            blk_y, blk_r = y[row, lo:hi], relu[row, lo:hi]
            if np.all(blk_y == 0):
                assert np.all(blk_r < 0.15)
            else:
                assert np.array_equal(blk_y, blk_r)
    assert np.array_equal(mask, y > 0)


def test_block_prune_block_one_thresholds_elementwise():
    x = np.array([[0.1, 0.2, -1.0]], dtype=np.float32)
    y, _ = ops.relu_block_prune(x, block=1, theta=0.15)
    assert np.array_equal(y, np.array([[0.0, 0.2, 0.0]], dtype=np.float32))


def test_block_prune_rejects_bad_block():
    with pytest.raises(ValueError):
        ops.relu_block_prune(np.zeros((1, 2), dtype=np.float32), block=0)


# --------------------------------------------------------------------------
# pooling and loss


def test_avgpool_forward_and_grad():
    rng = np.random.default_rng(50)
    x = rng.normal(size=(2, 3, 4, 5))
    y = ops.avgpool_forward(x)
    assert y.shape == (2, 1, 1, 5)
    assert np.allclose(y[:, 0, 0], x.mean(axis=(1, 2)), atol=1e-12)
    g = rng.normal(size=(2, 1, 1, 5))
    gx = ops.avgpool_input_grad(g, (3, 4))
    assert gx.shape == x.shape
    assert np.allclose(gx, np.broadcast_to(g / 12.0, x.shape), atol=1e-12)


def test_cross_entropy_equal_logits_is_log_c():
    for c in (2, 5, 17):
        loss, _ = ops.cross_entropy_loss(np.zeros(c), 0)
        assert abs(loss - math.log(c)) < 1e-12


def test_cross_entropy_grad_sums_to_zero():
    rng = np.random.default_rng(60)
    for _ in range(10):
        logits = rng.normal(scale=3.0, size=int(rng.integers(2, 9)))
        _, grad = ops.cross_entropy_loss(logits, int(rng.integers(0, logits.size)))
        assert abs(grad.sum()) < 1e-12


def test_cross_entropy_grad_matches_fd():
    rng = np.random.default_rng(61)
    for _ in range(10):
        logits = rng.normal(size=6)
        label = int(rng.integers(0, 6))
        _, grad = ops.cross_entropy_loss(logits, label)

        def loss():
            return ops.cross_entropy_loss(logits, label)[0]

        for idx in probe_indices(rng, grad, 3):
            fd = central_diff(loss, logits, idx)
            assert rel_err(grad[idx], fd) <= 1e-6


def test_cross_entropy_stable_for_large_logits():
    loss, grad = ops.cross_entropy_loss(np.array([1000.0, 0.0]), 0)
    assert loss == 0.0
    assert np.all(np.isfinite(grad))


def test_cross_entropy_rejects_bad_label_and_shape():
    with pytest.raises(ValueError):
        ops.cross_entropy_loss(np.zeros(3), 3)
    with pytest.raises(ShapeError):
        ops.cross_entropy_loss(np.zeros((2, 3)), 0)
