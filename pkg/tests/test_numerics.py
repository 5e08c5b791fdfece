"""Unit tests for the autodiff core: gradients, losses, optimizer."""

import numpy as np
import pytest

from twostream import numerics as nm

TOL = 1e-4


def t(arr, **kw):
    return nm.Tensor(np.asarray(arr, dtype=np.float64), **kw)


def rand(rng, *shape):
    return nm.Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------------------
# gradient checks (one representative shape per op; the acceptance suite
# sweeps seeds)

def test_grad_conv2d():
    rng = np.random.default_rng(0)
    x, w = rand(rng, 3, 6, 7), rand(rng, 4, 3, 3, 3)
    assert nm.grad_check(nm.conv2d, [x, w]) < TOL


def test_grad_conv1d():
    rng = np.random.default_rng(1)
    assert nm.grad_check(nm.conv1d, [rand(rng, 11), rand(rng, 5)]) < TOL


def test_grad_bias_relu_pool():
    rng = np.random.default_rng(2)
    assert nm.grad_check(nm.bias_add, [rand(rng, 4, 5, 6), rand(rng, 4)]) < TOL
    assert nm.grad_check(nm.avg_pool2, [rand(rng, 3, 6, 8)]) < TOL
    # relu is kinked at 0; keep inputs away from it
    x = nm.Tensor(rng.standard_normal((4, 4)) + np.sign(rng.standard_normal((4, 4))) * 0.5)
    assert nm.grad_check(nm.relu, [x]) < TOL


def test_grad_upsample_softmax_head_view():
    rng = np.random.default_rng(3)
    assert nm.grad_check(lambda x: nm.bilinear_upsample(x, 9, 11),
                         [rand(rng, 2, 4, 5)]) < TOL
    assert nm.grad_check(nm.softmax_channels, [rand(rng, 2, 5, 5)]) < TOL
    assert nm.grad_check(lambda m: nm.head_view(m, 3), [rand(rng, 6, 4, 5)]) < TOL


def test_grad_losses():
    rng = np.random.default_rng(4)
    p = nm.Tensor(rng.uniform(0.1, 0.9, size=(1, 6, 6)))
    target = (rng.random((1, 6, 6)) > 0.5).astype(np.float64)
    weight = rng.uniform(0.0, 1.0, size=(1, 6, 6))
    assert nm.grad_check(lambda x: nm.pixel_cross_entropy(x, target, weight),
                         [p]) < TOL

    logits = rand(rng, 12, 3)
    labels = rng.integers(-2, 3, size=12)
    assert nm.grad_check(lambda x: nm.focal_loss(x, labels), [logits]) < TOL

    pred = rand(rng, 5, 4)
    tgt = rng.standard_normal((5, 4)) + 0.05  # keep |diff| off the huber kink
    assert nm.grad_check(lambda x: nm.smooth_l1(x, tgt), [pred]) < TOL


def test_grad_check_negative_control():
    """A deliberately wrong backward must be flagged."""

    def broken(x):
        return nm._op(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing *2

    rng = np.random.default_rng(5)
    assert nm.grad_check(broken, [rand(rng, 3, 3)]) > 1e-2


def test_backward_accumulates_through_shared_node():
    x = t([2.0], requires_grad=True)
    y = x + x  # dy/dx = 2
    y.backward(np.ones(1))
    np.testing.assert_allclose(x.grad, [2.0])


def test_backward_linearity():
    rng = np.random.default_rng(6)
    x = nm.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    g1 = rng.standard_normal(())
    nm.tsum(nm.scale(x, 3.0)).backward(np.asarray(g1))
    np.testing.assert_allclose(x.grad, 3.0 * g1 * np.ones((3, 4)))


def test_take_rows_scatter_accumulates():
    x = t(np.arange(12.0).reshape(4, 3), requires_grad=True)
    y = nm.take_rows(x, [1, 1, 3])
    nm.tsum(y).backward()
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_allclose(x.grad, expected)


# ---------------------------------------------------------------------------
# op semantics

def test_softmax_channels_sums_to_one():
    rng = np.random.default_rng(7)
    y = nm.softmax_channels(nm.Tensor(rng.standard_normal((2, 8, 8)) * 10))
    np.testing.assert_allclose(y.data.sum(axis=0), 1.0, atol=1e-6)


def test_sigmoid_extremes_stable():
    y = nm.sigmoid(t([-500.0, 0.0, 500.0]))
    np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0], atol=1e-12)
    assert np.all(np.isfinite(y.data))


def test_add_shape_mismatch_raises():
    with pytest.raises(nm.ShapeError):
        nm.add(t(np.zeros((2, 3))), t(np.zeros((3, 2))))


def test_conv2d_rejects_even_kernel():
    with pytest.raises(nm.ShapeError):
        nm.conv2d(t(np.zeros((1, 4, 4))), t(np.zeros((1, 1, 2, 2))))


def test_head_view_layout():
    # channel slot*per + p must land at row (y*w + x)*k + slot, column p
    k, per, h, w = 2, 3, 2, 2
    m = np.zeros((k * per, h, w))
    for s in range(k):
        for p in range(per):
            for y in range(h):
                for x in range(w):
                    m[s * per + p, y, x] = 1000 * s + 100 * p + 10 * y + x
    rows = nm.head_view(nm.Tensor(m), k).data
    for y in range(h):
        for x in range(w):
            for s in range(k):
                row = (y * w + x) * k + s
                for p in range(per):
                    assert rows[row, p] == 1000 * s + 100 * p + 10 * y + x


def test_bilinear_upsample_constant_preserved():
    x = nm.Tensor(np.full((1, 4, 4), 3.25))
    y = nm.bilinear_upsample(x, 16, 16)
    np.testing.assert_allclose(y.data, 3.25, atol=1e-12)


def test_pixel_cross_entropy_no_supervision_flag():
    loss = nm.pixel_cross_entropy(t(np.full((1, 2, 2), 0.5)),
                                  np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
    assert loss.no_supervision
    assert loss.item() == 0.0


def test_focal_loss_ignore_labels_contribute_nothing():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((6, 3))
    labels = np.array([0, 1, -1, -1, 2, -1])
    base = nm.focal_loss(nm.Tensor(logits), labels).item()
    # flipping a label to ignore can only remove its contribution
    labels2 = labels.copy()
    labels2[2] = -2
    with_ign = nm.focal_loss(nm.Tensor(logits), labels2).item()
    assert with_ign <= base + 1e-12


def test_smooth_l1_values():
    loss = nm.smooth_l1(t([[0.5, 2.0]]), np.array([[0.0, 0.0]]))
    np.testing.assert_allclose(loss.item(), 0.5 * 0.25 + 1.5)


# ---------------------------------------------------------------------------
# optimizer / parameter store

def test_sgd_recurrence_by_hand():
    store = nm.ParamStore()
    p = store.add("p", np.array([1.0]))
    p.grad = np.array([0.5], dtype=np.float32)
    nm.sgd_step(store, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.5], rtol=1e-6)
    p.grad = np.array([0.5], dtype=np.float32)
    nm.sgd_step(store, lr=0.1, momentum=0.9)
    # v2 = 0.9*0.5 + 0.5 = 0.95
    np.testing.assert_allclose(p.data, [0.95 - 0.1 * 0.95], rtol=1e-6)


def test_sgd_nonfinite_gradient_names_param():
    store = nm.ParamStore()
    p = store.add("layer.w", np.zeros(2))
    p.grad = np.array([np.nan, 0.0], dtype=np.float32)
    with pytest.raises(nm.NumericsError, match="layer.w"):
        nm.sgd_step(store, lr=0.1)


def test_load_state_shape_mismatch():
    store = nm.ParamStore()
    store.add("w", np.zeros((2, 3)))
    with pytest.raises(nm.ShapeError, match="'w'"):
        store.load_state_arrays({"w": np.zeros((3, 2), dtype=np.float32)})
