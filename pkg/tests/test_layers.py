import math

import numpy as np
import pytest

import oracles
from l2lesion.errors import LabelOutOfRange, NonFiniteInput, ShapeMismatch
from l2lesion.layers import (
    ConvLayer,
    DenseLayer,
    ResidualBlock,
    conv2d,
    dense,
    detection_loss,
    global_max_pool,
    max_pool,
    multiclass_hinge,
    residual_forward,
    smooth_l1_bbox,
    softmax_cross_entropy,
)
from l2lesion.tensor import GradTape, Tensor, finite_difference_grad, mul, relative_error, tensor_sum


def _conv(w, b=None, stride=1, padding=0):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else b
    return ConvLayer(Tensor(w), Tensor(b), stride, padding)


class TestConv:
    def test_identity_1x1(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        assert np.array_equal(conv2d(Tensor(x), _conv(w)).data, x)

    def test_all_ones(self):
        out = conv2d(Tensor(np.ones((1, 3, 3))), _conv(np.ones((1, 1, 3, 3))))
        assert out.tolist() == [[[9.0]]]

    @pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (2, 2, 0), (5, 1, 2), (1, 1, 0), (3, 2, 1)])
    def test_naive_reference(self, k, stride, pad):
        rng = np.random.default_rng(k * 7 + stride)
        x = rng.normal(size=(4, 12, 12))
        w = rng.normal(size=(3, 4, k, k))
        b = rng.normal(size=3)
        got = conv2d(Tensor(x), _conv(w, b, stride, pad)).data
        assert np.allclose(got, oracles.conv2d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 2, 6, 6))
        layer = ConvLayer.init(2, 3, 3, rng)
        batched = conv2d(Tensor(x), layer).data
        for n in range(2):
            assert np.allclose(batched[n], conv2d(Tensor(x[n]), layer).data, rtol=0, atol=1e-14)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            conv2d(Tensor(np.ones((2, 4, 4))), _conv(np.ones((1, 3, 3, 3))))

    def test_bad_weights(self):
        with pytest.raises(ShapeMismatch):
            ConvLayer(Tensor(np.ones((1, 1, 2, 3))), Tensor(np.zeros(1)))

    def test_init_padding_same(self):
        layer = ConvLayer.init(2, 4, 3, np.random.default_rng(0))
        assert conv2d(Tensor(np.ones((2, 7, 7))), layer).shape == (4, 7, 7)


class TestMaxPool:
    def test_three_four(self):
        assert max_pool(Tensor([[[3.0, 4.0], [0.0, 0.0]]])).tolist() == [[[4.0]]]

    def test_tie_routes_to_first(self):
        x = Tensor(np.full((1, 2, 2), 7.0), requires_grad=True)
        with GradTape() as tape:
            loss = tensor_sum(max_pool(x))
        assert tape.backward(loss)[x.id].tolist() == [[[1.0, 0.0], [0.0, 0.0]]]

    @pytest.mark.parametrize("f,s", [(2, 2), (3, 1), (2, 1), (3, 3)])
    def test_naive_reference(self, f, s):
        x = np.random.default_rng(f + s).normal(size=(3, 9, 8))
        assert np.array_equal(max_pool(Tensor(x), f, s).data, oracles.max_pool(x, f, s))

    def test_global(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
        assert np.array_equal(global_max_pool(Tensor(x)).data, x.max(axis=(2, 3)))


class TestResidual:
    def test_zero_body_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 5)))
        body = [_conv(np.zeros((2, 2, 3, 3)), padding=1) for _ in range(2)]
        assert np.array_equal(residual_forward(x, ResidualBlock(body)).data, x.data)

    def test_identity_body_doubles(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 4)))
        body = [_conv(np.eye(2).reshape(2, 2, 1, 1))]
        assert np.array_equal(residual_forward(x, ResidualBlock(body)).data, 2 * x.data)

    def test_shape_violation(self):
        body = [_conv(np.ones((2, 2, 3, 3)))]  # no padding shrinks the map
        with pytest.raises(ShapeMismatch):
            residual_forward(Tensor(np.ones((2, 5, 5))), ResidualBlock(body))

    @pytest.mark.parametrize("variant,depth", [("vanilla", 2), ("dense", 3)])
    def test_variant_depth(self, variant, depth):
        block = ResidualBlock.init(4, np.random.default_rng(0), variant)
        assert len(block.body) == depth
        assert len(block.params()) == 2 * depth

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(3)
        block = ResidualBlock.init(2, rng, "vanilla")
        x = Tensor(rng.normal(size=(2, 4, 4)))
        r = Tensor(rng.normal(size=(2, 4, 4)))

        def f(t):
            return tensor_sum(mul(residual_forward(t, block), r))

        xt = Tensor(x.data, requires_grad=True)
        with GradTape() as tape:
            loss = f(xt)
        assert relative_error(tape.backward(loss)[xt.id], finite_difference_grad(f, x)) < 1e-4


class TestDense:
    def test_forward(self):
        layer = DenseLayer(Tensor([[1.0, 0.0], [0.0, 2.0]]), Tensor([0.5, -0.5]))
        assert dense(Tensor([[1.0, 1.0]]), layer).tolist() == [[1.5, 1.5]]

    def test_shape(self):
        layer = DenseLayer.init(3, 2, np.random.default_rng(0))
        with pytest.raises(ShapeMismatch):
            dense(Tensor(np.ones((1, 4))), layer)


class TestLosses:
    def test_ce_uniform(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((3, 5))), [0, 2, 4])
        assert abs(float(loss.data) - math.log(5)) < 1e-12

    def test_ce_saturated(self):
        z = np.zeros((1, 5))
        z[0, 2] = 50.0
        assert float(softmax_cross_entropy(Tensor(z), [2]).data) < 1e-6

    def test_ce_reference(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(4, 5)) * 3
        y = [0, 3, 1, 4]
        ref = np.mean([-(z[i, y[i]] - math.log(sum(math.exp(v) for v in z[i]))) for i in range(4)])
        assert abs(float(softmax_cross_entropy(Tensor(z), y).data) - ref) < 1e-12

    def test_ce_label_range(self):
        with pytest.raises(LabelOutOfRange):
            softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_hinge_satisfied(self):
        assert float(multiclass_hinge(Tensor([[5.0, 1.0, 2.0]]), [0]).data) == 0.0

    def test_hinge_equal_scores(self):
        assert float(multiclass_hinge(Tensor(np.zeros((2, 3))), [0, 1], 1.0).data) == 2.0

    def test_hinge_reference(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=(6, 4))
        y = [int(v) for v in rng.integers(0, 4, size=6)]
        ref = np.mean([sum(max(0.0, 1.0 + s[i, k] - s[i, y[i]]) for k in range(4) if k != y[i])
                       for i in range(6)])
        assert abs(float(multiclass_hinge(Tensor(s), y).data) - ref) < 1e-12

    def test_hinge_label_range(self):
        with pytest.raises(LabelOutOfRange):
            multiclass_hinge(Tensor(np.zeros((1, 2))), [-1])

    def test_smooth_l1_branches(self):
        zero = np.zeros((1, 4))
        assert float(smooth_l1_bbox(Tensor(zero), Tensor(zero)).data) == 0.0
        q = zero.copy()
        q[0, 0] = 0.5
        assert float(smooth_l1_bbox(Tensor(q), Tensor(zero)).data) == 0.125 / 4
        lin = zero.copy()
        lin[0, 1] = 3.0
        assert float(smooth_l1_bbox(Tensor(lin), Tensor(zero)).data) == 2.5 / 4

    def test_smooth_l1_shape(self):
        with pytest.raises(ShapeMismatch):
            smooth_l1_bbox(Tensor(np.zeros((2, 4))), Tensor(np.zeros((1, 4))))

    def test_detection_loss_sum(self):
        b = detection_loss(Tensor(1.5), Tensor(0.5))
        assert float(b.total.data) == 2.0
        x = detection_loss(Tensor(0.7), Tensor(0.0))
        assert float(x.total.data) == 0.7

    def test_detection_loss_nonfinite(self):
        with pytest.raises(NonFiniteInput):
            detection_loss(Tensor._wrap(np.array(np.nan)), Tensor(0.0))

    def test_detection_loss_grads_reach_both_heads(self):
        rng = np.random.default_rng(2)
        scores = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        deltas = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        target = Tensor(rng.normal(size=(4, 4)))
        with GradTape() as tape:
            bundle = detection_loss(multiclass_hinge(scores, [0, 1, 2, 0]), smooth_l1_bbox(deltas, target))
        gs, gd = tape.gradient(bundle.total, [scores, deltas])
        assert np.any(gs.data != 0) and np.any(gd.data != 0)
