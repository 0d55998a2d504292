import numpy as np
import pytest

import oracles
from l2lesion import kernels
from l2lesion.errors import ShapeMismatch, WindowLargerThanInput
from l2lesion.l2pool import L2PoolConfig, global_l2_pool, l2_pool_backward, l2_pool_forward
from l2lesion.tensor import GradTape, Tensor, finite_difference_grad, relative_error, tensor_sum


def test_paper_shape_law():
    x = Tensor(np.zeros((64, 224, 224)))
    assert l2_pool_forward(x, L2PoolConfig(2, 2)).shape == (64, 112, 112)


def test_three_four_five():
    x = Tensor([[[3.0, 4.0], [0.0, 0.0]]])
    assert l2_pool_forward(x).tolist() == [[[5.0]]]


def test_zero_input():
    out = l2_pool_forward(Tensor(np.zeros((2, 6, 6))))
    assert not out.data.any()


def test_matches_brute_force_6x6():
    x = np.random.default_rng(0).normal(size=(1, 6, 6))
    assert np.array_equal(l2_pool_forward(Tensor(x)).data, oracles.l2_pool(x, 2, 2))


def test_normalized_is_rms():
    x = Tensor([[[3.0, 4.0], [0.0, 0.0]]])
    out = l2_pool_forward(x, L2PoolConfig(normalized=True))
    assert out.data[0, 0, 0] == np.sqrt(25.0 / 4.0)


def test_window_too_large():
    with pytest.raises(WindowLargerThanInput):
        l2_pool_forward(Tensor(np.ones((1, 2, 2))), L2PoolConfig(3, 1))


@pytest.mark.parametrize("kw", [dict(filter_size=0), dict(stride=0), dict(epsilon=0.0),
                                dict(gradient_mode="other")])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        L2PoolConfig(**kw)


def test_default_config():
    cfg = L2PoolConfig()
    assert (cfg.filter_size, cfg.stride, cfg.normalized, cfg.gradient_mode) == (2, 2, False, "analytic")
    assert 0 < cfg.epsilon <= 1e-6


class TestBackward:
    def test_three_four(self):
        # a single 1x2 window holding (3, 4)
        g = global_grad(Tensor([[[3.0, 4.0]]]))
        assert np.allclose(g, [[[0.6, 0.8]]], rtol=0, atol=1e-15)

    def test_zero_window_zero_grad(self):
        x = Tensor(np.zeros((1, 2, 2)))
        g = l2_pool_backward(x, Tensor(np.ones((1, 1, 1))))
        assert not g.data.any()

    def test_fd_8x8(self):
        x = Tensor(np.random.default_rng(4).normal(size=(1, 8, 8)))
        with GradTape() as tape:
            xt = Tensor(x.data, requires_grad=True)
            loss = tensor_sum(l2_pool_forward(xt))
        analytic = tape.backward(loss)[xt.id]
        numeric = finite_difference_grad(lambda t: tensor_sum(l2_pool_forward(t)), x)
        assert relative_error(analytic, numeric) < 1e-4

    def test_upstream_shape_checked(self):
        with pytest.raises(ShapeMismatch):
            l2_pool_backward(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 3, 3))))

    def test_literal_mode_formula(self):
        # window sum of squares 25: literal gives n * g / (2 * 5) on every element
        x = Tensor([[[3.0, 4.0], [0.0, 0.0]]])
        g = l2_pool_backward(x, Tensor([[[1.0]]]), L2PoolConfig(2, 2, gradient_mode="paper_literal"))
        assert np.allclose(g.data, 4.0 / 10.0, rtol=0, atol=1e-15)

    def test_literal_mode_differs_from_analytic(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 4)))
        up = Tensor(np.ones((1, 2, 2)))
        a = l2_pool_backward(x, up)
        p = l2_pool_backward(x, up, L2PoolConfig(gradient_mode="paper_literal"))
        assert relative_error(a, p) > 1e-2

    def test_overlapping_windows_accumulate(self):
        x = np.random.default_rng(2).normal(size=(1, 3, 3))
        cfg = L2PoolConfig(2, 1)
        g = l2_pool_backward(Tensor(x), Tensor(np.ones((1, 2, 2))), cfg).data
        expect = np.zeros_like(x)
        for i in range(2):
            for j in range(2):
                w = x[0, i:i + 2, j:j + 2]
                expect[0, i:i + 2, j:j + 2] += w / np.sqrt((w * w).sum())
        assert np.allclose(g, expect, rtol=1e-13, atol=0)

    def test_normalized_folds_sqrt_n(self):
        x = np.random.default_rng(5).normal(size=(1, 2, 2))
        g = l2_pool_backward(Tensor(x), Tensor(np.ones((1, 1, 1))), L2PoolConfig(normalized=True)).data
        expect = x / np.sqrt((x * x).sum()) / 2.0
        assert np.allclose(g, expect, rtol=1e-13, atol=0)


def global_grad(x):
    xt = Tensor(x.data, requires_grad=True)
    with GradTape() as tape:
        loss = tensor_sum(global_l2_pool(xt))
    return tape.backward(loss)[xt.id].data


class TestGlobal:
    def test_all_ones(self):
        assert global_l2_pool(Tensor(np.ones((1, 2, 2)))).tolist() == [2.0]

    def test_one_hot(self):
        x = np.zeros((1, 3, 3))
        x[0, 1, 2] = 1.0
        assert global_l2_pool(Tensor(x)).tolist() == [1.0]

    def test_equals_full_window(self):
        x = np.random.default_rng(1).normal(size=(3, 5, 5))
        g = global_l2_pool(Tensor(x)).data
        full = l2_pool_forward(Tensor(x), L2PoolConfig(5, 1)).data.reshape(3)
        assert np.array_equal(g, full)

    def test_normalized(self):
        x = np.ones((2, 4, 4)) * 3.0
        assert global_l2_pool(Tensor(x), L2PoolConfig(normalized=True)).tolist() == [3.0, 3.0]

    def test_batched(self):
        x = np.random.default_rng(2).normal(size=(2, 3, 4, 4))
        assert global_l2_pool(Tensor(x)).shape == (2, 3)


@pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled kernels not built")
class TestBackends:
    @pytest.mark.parametrize("f,s", [(1, 1), (2, 2), (3, 1), (3, 2), (2, 3)])
    @pytest.mark.parametrize("normalized", [False, True])
    def test_bit_identical(self, f, s, normalized):
        rng = np.random.default_rng(f * 10 + s)
        x = rng.normal(size=(3, 9, 11))
        g = rng.normal(size=(3, (9 - f) // s + 1, (11 - f) // s + 1))
        for literal in (False, True):
            outs = []
            for be in (kernels.compiled_backend, kernels.python_backend):
                fwd = np.asarray(be.l2_pool_fwd(x, f, f, s, s, normalized))
                bwd = np.asarray(be.l2_pool_bwd(x, g, f, f, s, s, normalized, literal, 1e-12))
                outs.append((fwd.tobytes(), bwd.tobytes()))
            assert outs[0] == outs[1]

    def test_use_backend_switch(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 6)))
        prev = kernels.BACKEND
        try:
            kernels.use_backend("python")
            a = l2_pool_forward(x).data
            kernels.use_backend("compiled")
            b = l2_pool_forward(x).data
        finally:
            kernels.use_backend(prev)
        assert a.tobytes() == b.tobytes()
