"""Tensor engine: frozen micro-values, graph semantics, finite-difference checks."""

import numpy as np
import pytest

from gfdet.autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    backward,
    check_gradients,
    concat_channels,
    conv2d,
    fan_uniform,
    flatten_head_maps,
    gather_anchors,
    relu,
    scale,
    sgd_step,
    slice_channels,
    smooth_l1_sum,
    softmax_cross_entropy_sum,
    sum_all,
    sum_squares,
)


def t4(values, shape, requires_grad=False):
    return Tensor(np.asarray(values, dtype=np.float64).reshape(shape), requires_grad)


class TestConv2d:
    def test_ones_kernel_padding_one(self):
        # 1x1x2x2 input [[1,2],[3,4]], 3x3 kernel of ones, zero bias, pad 1:
        # every output position sees the full input -> [[10,10],[10,10]].
        x = t4([1, 2, 3, 4], (1, 1, 2, 2))
        k = Parameter(np.ones((1, 1, 3, 3)), "k")
        b = Parameter(np.zeros((1, 1, 1, 1)), "b")
        out = conv2d(x, k, b, stride=1, padding=1)
        np.testing.assert_array_equal(out.data[0, 0], [[10.0, 10.0], [10.0, 10.0]])

    def test_bias_grad_counts_positions(self):
        x = t4([1, 2, 3, 4], (1, 1, 2, 2))
        k = Parameter(np.ones((1, 1, 3, 3)), "k")
        b = Parameter(np.zeros((1, 1, 1, 1)), "b")
        loss = sum_all(conv2d(x, k, b, padding=1))
        backward(loss)
        assert b.grad.item() == 4.0  # bias feeds all four output positions

    def test_single_pixel_center_weight(self):
        rng = np.random.default_rng(3)
        kdata = rng.normal(size=(1, 1, 3, 3))
        x = t4([1.7], (1, 1, 1, 1))
        out = conv2d(x, Parameter(kdata, "k"), Parameter([[[[0.25]]]], "b"), padding=1)
        assert out.data.item() == pytest.approx(kdata[0, 0, 1, 1] * 1.7 + 0.25, abs=1e-15)

    def test_spatial_preserved_3x3_s1_p1(self):
        rng = np.random.default_rng(0)
        for h, w in [(5, 5), (7, 3), (1, 1), (4, 9)]:
            x = Tensor(rng.normal(size=(2, 3, h, w)))
            k = Parameter(rng.normal(size=(4, 3, 3, 3)), "k")
            b = Parameter(np.zeros((1, 4, 1, 1)), "b")
            assert conv2d(x, k, b, stride=1, padding=1).shape == (2, 4, h, w)

    def test_stride_two_halves(self):
        x = Tensor(np.zeros((1, 2, 8, 8)))
        k = Parameter(np.zeros((5, 2, 3, 3)), "k")
        b = Parameter(np.zeros((1, 5, 1, 1)), "b")
        assert conv2d(x, k, b, stride=2, padding=1).shape == (1, 5, 4, 4)

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        k = Parameter(np.zeros((2, 4, 3, 3)), "k")
        b = Parameter(np.zeros((1, 2, 1, 1)), "b")
        with pytest.raises(ShapeError):
            conv2d(x, k, b, padding=1)

    def test_bad_bias_shape_rejected(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        k = Parameter(np.zeros((2, 3, 3, 3)), "k")
        with pytest.raises(ShapeError):
            conv2d(x, k, Parameter(np.zeros((1, 3, 1, 1)), "b"), padding=1)


class TestGraph:
    def test_relu_subgradient_at_zero_is_zero(self):
        x = Parameter(np.array([[[[-1.0, 0.0, 2.0]]]]), "x")
        loss = sum_all(relu(x))
        backward(loss)
        np.testing.assert_array_equal(x.grad[0, 0, 0], [0.0, 0.0, 1.0])

    def test_shared_subexpression_sums_once_each(self):
        # y = f(x) used twice must match an explicitly duplicated subgraph.
        xdata = np.array([[[[1.5, -0.5], [2.0, 0.25]]]])
        x1 = Parameter(xdata.copy(), "x1")
        shared = relu(scale(x1, 3.0))
        loss1 = sum_all(add(shared, shared))
        backward(loss1)

        x2 = Parameter(xdata.copy(), "x2")
        loss2 = sum_all(add(relu(scale(x2, 3.0)), relu(scale(x2, 3.0))))
        backward(loss2)
        np.testing.assert_array_equal(x1.grad, x2.grad)

    def test_repeated_backward_accumulates(self):
        x = Parameter(np.full((1, 1, 1, 1), 2.0), "x")
        loss = sum_squares(x)
        backward(loss)
        first = x.grad.copy()
        backward(loss)
        np.testing.assert_array_equal(x.grad, 2.0 * first)

    def test_backward_needs_scalar(self):
        x = Parameter(np.ones((1, 1, 2, 2)), "x")
        with pytest.raises(ShapeError):
            backward(relu(x))

    def test_add_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 2, 2, 2))))

    def test_rank_enforced(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((3, 3)))

    def test_concat_slice_roundtrip(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(2, 3, 4, 4)))
        b = Tensor(rng.normal(size=(2, 5, 4, 4)))
        joined = concat_channels(a, b)
        np.testing.assert_array_equal(slice_channels(joined, 0, 3).data, a.data)
        np.testing.assert_array_equal(slice_channels(joined, 3, 8).data, b.data)

    def test_gather_duplicates_accumulate(self):
        x = Parameter(np.arange(8, dtype=float).reshape(1, 2, 4, 1), "x")
        picked = gather_anchors(x, np.array([1, 1, 3]))
        backward(sum_all(picked))
        np.testing.assert_array_equal(x.grad[0, 0, :, 0], [0, 2, 0, 1])

    def test_flatten_head_maps_row_order(self):
        # One map, batch 1, 2 anchor slots, 2 entries, 1x2 spatial: rows must
        # come out location-major then slot-major with entries down the axis.
        data = np.arange(8, dtype=float).reshape(1, 4, 1, 2)  # channels (a*2+e)
        table = flatten_head_maps([Tensor(data)], entries=2)
        assert table.shape == (1, 2, 4, 1)
        rows = table.data[0, :, :, 0].T
        # location (0,0): slot0 entries (0,2), slot1 entries (4,6); then (0,1)
        np.testing.assert_array_equal(rows, [[0, 2], [4, 6], [1, 3], [5, 7]])


class TestSgd:
    def test_step_updates_and_zeroes(self):
        p = Parameter(np.full((1, 1, 1, 1), 3.0), "p")
        backward(sum_squares(p))
        sgd_step([p], lr=0.5)
        assert p.data.item() == 3.0 - 0.5 * 6.0
        assert p.grad is None

    def test_missing_grad_rejected(self):
        p = Parameter(np.ones((1, 1, 1, 1)), "p")
        with pytest.raises(ValueError, match="no gradient"):
            sgd_step([p], lr=0.1)

    def test_lr_zero_is_identity(self):
        rng = np.random.default_rng(11)
        p = Parameter(rng.normal(size=(2, 2, 3, 3)), "p")
        before = p.data.copy()
        backward(sum_squares(p))
        sgd_step([p], lr=0.0)
        np.testing.assert_array_equal(p.data, before)


def _away_from(rng, shape, kinks, margin=5e-3):
    """Sample values whose distance to every kink exceeds margin."""
    x = rng.normal(size=shape)
    for k in kinks:
        bad = np.abs(x - k) < margin
        while bad.any():
            x[bad] = rng.normal(size=int(bad.sum()))
            bad = np.abs(x - k) < margin
    return x


class TestGradcheck:
    @pytest.mark.parametrize("seed", range(20))
    def test_conv_relu_chain(self, seed):
        rng = np.random.default_rng(seed)
        x = Parameter(_away_from(rng, (2, 2, 3, 3), [0.0]), "x")
        k = Parameter(rng.normal(size=(3, 2, 3, 3)) * 0.7, "k")
        b = Parameter(rng.normal(size=(1, 3, 1, 1)) * 0.3, "b")

        def build():
            return sum_all(relu(conv2d(x, k, b, stride=1, padding=1))), [x, k, b]

        assert check_gradients(build, eps=1e-5) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_concat_add_slice(self, seed):
        rng = np.random.default_rng(100 + seed)
        a = Parameter(rng.normal(size=(1, 2, 2, 2)), "a")
        b = Parameter(rng.normal(size=(1, 3, 2, 2)), "b")
        c = Parameter(rng.normal(size=(1, 5, 2, 2)), "c")

        def build():
            j = add(concat_channels(a, b), c)
            return sum_squares(slice_channels(j, 1, 4)), [a, b, c]

        assert check_gradients(build, eps=1e-5) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_softmax_ce(self, seed):
        rng = np.random.default_rng(200 + seed)
        logits = Parameter(rng.normal(size=(1, 2, 6, 1)), "logits")
        labels = rng.integers(0, 2, size=6)

        def build():
            return softmax_cross_entropy_sum(logits, labels), [logits]

        assert check_gradients(build, eps=1e-5) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_smooth_l1(self, seed):
        rng = np.random.default_rng(300 + seed)
        pred = Parameter(np.zeros((1, 4, 3, 1)), "pred")
        # keep residuals away from the |r| = 1 kink
        resid = _away_from(rng, (1, 4, 3, 1), [-1.0, 1.0])
        target = pred.data - resid

        def build():
            return smooth_l1_sum(pred, target), [pred]

        assert check_gradients(build, eps=1e-5) < 1e-4

    def test_gather_and_flatten(self):
        rng = np.random.default_rng(42)
        m1 = Parameter(rng.normal(size=(1, 12, 2, 2)), "m1")  # 2 slots x 6
        m2 = Parameter(rng.normal(size=(1, 6, 1, 1)), "m2")

        def build():
            table = flatten_head_maps([m1.tensor, m2.tensor], entries=6)
            picked = gather_anchors(table, np.array([0, 3, 8, 8]))
            return sum_squares(picked), [m1, m2]

        assert check_gradients(build, eps=1e-5) < 1e-4


def test_fan_uniform_bound():
    rng = np.random.default_rng(5)
    w = fan_uniform(rng, (8, 4, 3, 3))
    bound = np.sqrt(6.0 / (4 * 9 + 8 * 9))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.5 * bound  # actually fills the range
