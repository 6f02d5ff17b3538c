import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acoustemo import autodiff as ad
from acoustemo.autodiff import Tensor


def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestForward:
    def test_identity_matmul(self):
        a = np.arange(9.0).reshape(3, 3)
        out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_matmul(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_matmul_associativity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b, c = (Tensor(rng.normal(size=s)) for s in ((3, 4), (4, 5), (5, 2)))
            left = ((a @ b) @ c).data
            right = (a @ (b @ c)).data
            assert np.max(np.abs(left - right) / (np.abs(left) + 1e-12)) < 1e-9

    def test_softmax_uniform(self):
        out = ad.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_softmax_large_logits(self):
        out = ad.softmax_rows(Tensor([[1000.0, 0.0]]))
        assert out.data[0, 0] == 1.0
        assert 0.0 <= out.data[0, 1] < 1e-300

    def test_softmax_extended_precision(self):
        rng = np.random.default_rng(11)
        x = rng.normal(scale=3.0, size=(3, 4))
        got = ad.softmax_rows(Tensor(x)).data
        mpmath.mp.dps = 50
        for i in range(3):
            exps = [mpmath.exp(mpmath.mpf(float(v))) for v in x[i]]
            total = mpmath.fsum(exps)
            for j in range(4):
                assert abs(got[i, j] - float(exps[j] / total)) < 1e-12

    def test_softmax_row_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 6))
        shifted = x + rng.normal(size=(4, 1)) * 10
        a = ad.softmax_rows(Tensor(x)).data
        b = ad.softmax_rows(Tensor(shifted)).data
        assert np.max(np.abs(a - b)) < 1e-12
        assert np.max(np.abs(a.sum(axis=1) - 1)) < 1e-12

    def test_masked_softmax_zeroes(self):
        mask = np.tril(np.ones((3, 3), dtype=bool))
        out = ad.softmax_rows(Tensor(np.zeros((3, 3))), mask).data
        np.testing.assert_allclose(out, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]], atol=1e-15)
        assert np.all(out[~mask] == 0.0)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(ad.NonFiniteValue):
            Tensor([[1.0, bad]])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_overflow_inside_op_rejected(self):
        with pytest.raises(ad.NonFiniteValue):
            Tensor([[1e200]]) @ Tensor([[1e200]])

    def test_deterministic_replay(self):
        def run():
            rng = np.random.default_rng(42)
            a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
            return ad.gelu(ad.rms_norm_rows(a @ b)).data

        assert run().tobytes() == run().tobytes()


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_grad(self):
        x = Tensor(np.arange(6.0).reshape(2, 3) - 2, requires_grad=True)
        ad.backward(ad.sum_all(x * x))
        np.testing.assert_array_equal(x.grad, 2 * x.data)

    def test_matmul_grad_closed_form(self):
        rng = np.random.default_rng(0)
        a, b = _leaf(rng, 4, 5), _leaf(rng, 5, 3)
        ad.backward(ad.sum_all(a @ b))
        np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b.data.T, rtol=1e-12)
        err = ad.finite_diff_check(lambda t: ad.sum_all(t @ b), a)
        assert err < 1e-6

    def test_not_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ad.NotScalar):
            ad.backward(x @ x)

    def test_detached(self):
        with pytest.raises(ad.DetachedTensor):
            ad.backward(ad.sum_all(Tensor(np.ones((2, 2)))))

    def test_shared_leaf_accumulates(self):
        x = Tensor([[3.0]], requires_grad=True)
        ad.backward(ad.sum_all(x * x + x))
        assert x.grad[0, 0] == 7.0

    def test_repeated_backward_accumulates(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        ad.backward(ad.sum_all(x))
        ad.backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])

    def test_no_grad_builds_no_graph(self):
        x = Tensor([[1.0]], requires_grad=True)
        with ad.no_grad():
            y = x @ x
        assert not y.requires_grad and y.is_leaf

    def test_topological_order_visits_once(self):
        x = Tensor([[2.0]], requires_grad=True)
        y = x * x
        z = y + y
        order = ad.topological_order(ad.sum_all(z))
        assert len(order) == len({id(n) for n in order})
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]


class TestFiniteDiffCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(5, 5))
        A = Tensor(m @ m.T)
        x = _leaf(rng, 5, 1)
        assert ad.finite_diff_check(lambda t: ad.sum_all(t.T @ A @ t), x, h=1e-5) < 1e-7

    def test_softmax_cross_entropy_composite(self):
        rng = np.random.default_rng(2)
        x = _leaf(rng, 4, 6)
        f = lambda t: ad.sum_all(ad.cross_entropy_rows(t, [0, 3, 5, 1]))
        assert ad.finite_diff_check(f, x) < 1e-5

    def test_wrong_gradient_is_flagged(self):
        rng = np.random.default_rng(3)
        x = _leaf(rng, 3, 3)
        f = lambda t: ad.sum_all(t * t)
        # true gradient is 2x; reporting half of it gives |a - n| / |a| = 1
        err = ad.finite_diff_check(f, x, analytic=x.data)
        assert abs(err - 1.0) < 1e-3
        assert ad.finite_diff_check(f, x, analytic=2 * x.data) < 1e-7


def _op_cases():
    """(name, builder) pairs; each builder maps (rng, leaf) to a scalar loss."""
    def weights(rng, n):
        return Tensor(rng.normal(size=(n, 1)))

    return {
        "matmul": lambda rng, x: ad.sum_all(x @ Tensor(rng.normal(size=(x.shape[1], 2)))),
        "add_bias": lambda rng, x: ad.sum_all(ad.add(x, Tensor(rng.normal(size=x.shape[1]))) * x),
        "sub": lambda rng, x: ad.sum_all((x - Tensor(rng.normal(size=x.shape))) * x),
        "scale": lambda rng, x: ad.sum_all(ad.scale(x, -1.7) * x),
        "transpose": lambda rng, x: ad.sum_all(x.T @ weights(rng, x.shape[0])),
        "softmax": lambda rng, x: ad.sum_all(ad.softmax_rows(x) @ weights(rng, x.shape[1])),
        "rms_norm": lambda rng, x: ad.sum_all(ad.rms_norm_rows(x) @ weights(rng, x.shape[1])),
        "gelu": lambda rng, x: ad.sum_all(ad.gelu(x) @ weights(rng, x.shape[1])),
        "take_rows": lambda rng, x: ad.sum_all(ad.take_rows(x, [0, 0, x.shape[0] - 1]) @ weights(rng, x.shape[1])),
        "concat": lambda rng, x: ad.sum_all(ad.concat_rows([x, ad.scale(x, 2.0)]) @ weights(rng, x.shape[1])),
        "slice": lambda rng, x: ad.sum_all(ad.slice_rows(x, 1, x.shape[0]) @ weights(rng, x.shape[1])),
        "cross_entropy": lambda rng, x: ad.sum_all(ad.cross_entropy_rows(x, [i % x.shape[1] for i in range(x.shape[0])])),
    }


@pytest.mark.parametrize("op", sorted(_op_cases()))
def test_every_op_matches_finite_differences(op):
    build = _op_cases()[op]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        state = rng.bit_generator.state

        def f(t):
            rng.bit_generator.state = state
            return build(rng, t)

        worst = max(worst, ad.finite_diff_check(f, x, h=1e-6))
    assert worst < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(row):
    p = ad.softmax_rows(Tensor([row])).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_grad_shape_matches_data():
    rng = np.random.default_rng(9)
    x = _leaf(rng, 3, 2)
    ad.backward(ad.sum_all(ad.gelu(x @ Tensor(rng.normal(size=(2, 4))))))
    assert x.grad.shape == x.data.shape
    assert x.dims == [3, 2]
    assert math.prod(x.dims) == x.data.size
