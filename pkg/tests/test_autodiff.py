import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import volauction.autodiff as ad
from volauction.autodiff import GradientTape


def finite_difference(f, x, idx, h):
    xp = x.copy()
    xp[idx] += h
    xm = x.copy()
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def check_gradients(f, x, n_coords=20, h=1e-6, rtol=1e-5, rng=None):
    """f: array -> (tape, loss Var, leaf Var). Compares leaf grads to FD."""
    rng = rng or np.random.default_rng(0)
    tape, loss, leaf = f(x)
    tape.backward(loss)
    for _ in range(n_coords):
        idx = tuple(rng.integers(s) for s in x.shape)
        fd = finite_difference(lambda a: f(a)[1].value, x, idx, h)
        an = leaf.grad[idx]
        assert abs(fd - an) <= rtol * max(1.0, abs(fd), abs(an)), (idx, fd, an)


class TestBasicOps:
    def test_add_mul_chain(self):
        t = GradientTape()
        x = t.var([2.0, 3.0])
        y = ad.mul(ad.add(x, 1.0), x)  # (x+1)*x
        t.backward(ad.vsum(y))
        assert x.grad == pytest.approx([5.0, 7.0])  # 2x+1

    def test_shared_subexpression(self):
        t = GradientTape()
        x = t.var(3.0)
        y = ad.mul(x, x)
        z = ad.add(y, y)
        t.backward(z)
        assert x.grad == pytest.approx(12.0)

    def test_sub_and_neg(self):
        t = GradientTape()
        x = t.var([1.0, 2.0])
        y = t.var([3.0, 5.0])
        t.backward(ad.vsum(ad.sub(x, y)))
        assert x.grad == pytest.approx([1, 1])
        assert y.grad == pytest.approx([-1, -1])

    def test_broadcast_bias(self):
        t = GradientTape()
        b = t.var([1.0, 2.0, 3.0])
        x = np.ones((4, 3))
        t.backward(ad.vsum(ad.add(x, b)))
        assert b.grad == pytest.approx([4, 4, 4])

    def test_matmul_shapes(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(5, 4))

        def f(x):
            t = GradientTape()
            v = t.var(x)
            out = ad.matmul(v, A)
            return t, ad.vsum(ad.square(out)), v

        check_gradients(f, rng.normal(size=(3, 5)))

    def test_relu_sigmoid_softmax(self):
        rng = np.random.default_rng(2)

        def f(x):
            t = GradientTape()
            v = t.var(x)
            h = ad.relu(v)
            s = ad.sigmoid(h)
            p = ad.softmax(s)
            return t, ad.vsum(ad.mul(p, np.arange(x.shape[-1], dtype=float))), v

        check_gradients(f, rng.normal(size=(4, 6)) + 0.3)

    def test_softmax_rows_sum_to_one(self):
        t = GradientTape()
        x = t.var(np.random.default_rng(3).normal(size=(7, 5)))
        p = ad.softmax(x)
        assert p.value.sum(axis=-1) == pytest.approx(np.ones(7))

    def test_softmax_gradient_orthogonal_to_ones(self):
        # upstream signal orthogonal to all-ones: gradient rows sum to zero
        rng = np.random.default_rng(4)
        t = GradientTape()
        x = t.var(rng.normal(size=(3, 5)))
        p = ad.softmax(x)
        signal = rng.normal(size=(3, 5))
        signal -= signal.mean(axis=-1, keepdims=True)
        t.backward(ad.vsum(ad.mul(p, signal)))
        assert x.grad.sum(axis=-1) == pytest.approx(np.zeros(3), abs=1e-12)

    def test_rowmax_routes_gradient_to_argmax(self):
        t = GradientTape()
        x = t.var(np.array([[1.0, 5.0, 2.0], [7.0, 0.0, 3.0]]))
        t.backward(ad.vsum(ad.rowmax(x)))
        assert x.grad == pytest.approx(np.array([[0, 1, 0], [1, 0, 0]]))

    def test_gather_scatter_roundtrip(self):
        t = GradientTape()
        x = t.var(np.array([[3.0, 1.0, 2.0]]))
        order = np.argsort(-x.value, axis=-1)
        ranked = ad.gather(x, order)
        assert ranked.value == pytest.approx(np.array([[3, 2, 1]]))
        t.backward(ad.vsum(ad.mul(ranked, np.array([[1.0, 10.0, 100.0]]))))
        assert x.grad == pytest.approx(np.array([[1, 100, 10]]))

    def test_minimum_const_broadcast(self):
        t = GradientTape()
        x = t.var(np.array([[1.0, 5.0]]))
        y = ad.minimum_const(ad.expand_dims(x, 1), np.array([3.0, 6.0])[None, :, None])
        assert y.value.shape == (1, 2, 2)
        assert y.value == pytest.approx(np.array([[[1, 3], [1, 5]]]))

    def test_hinge(self):
        t = GradientTape()
        x = t.var(np.array([-2.0, 0.0, 2.0]))
        h = ad.hinge(x)
        t.backward(ad.vsum(h))
        assert h.value == pytest.approx([0, 0, 2])
        assert x.grad == pytest.approx([0, 0, 1])

    def test_backward_rejects_nonscalar_and_nonfinite(self):
        t = GradientTape()
        x = t.var([1.0, 2.0])
        with pytest.raises(ValueError):
            t.backward(ad.square(x))
        t2 = GradientTape()
        y = t2.var(np.inf)
        with pytest.raises(FloatingPointError):
            t2.backward(ad.add(y, 0.0))


class TestLotValue:
    def test_value_and_both_gradients(self):
        widths = np.array([500.0, 500.0, 500.0, 500.0, 500.0])
        prices = np.array([20.0, 18, 18, 16, 16])

        t = GradientTape()
        q = t.var(np.array([1800.0]))
        p = t.var(prices[None, :])
        v = ad.lot_value(p, q, widths)
        assert v.value == pytest.approx([32800.0])
        t.backward(ad.vsum(v))
        assert q.grad == pytest.approx([16.0])  # marginal price of lot 4
        assert p.grad == pytest.approx(np.array([[500, 500, 500, 300, 0]]))

    def test_right_derivative_at_boundary(self):
        widths = np.array([2.0, 2.0])
        t = GradientTape()
        q = t.var(np.array([2.0]))  # exactly at the lot-1/lot-2 boundary
        v = ad.lot_value(np.array([[5.0, 4.0]]), q, widths)
        t.backward(ad.vsum(v))
        assert q.grad == pytest.approx([4.0])

    def test_zero_derivative_beyond_grid(self):
        widths = np.array([2.0, 2.0])
        t = GradientTape()
        q = t.var(np.array([4.0]))
        v = ad.lot_value(np.array([[5.0, 4.0]]), q, widths)
        t.backward(ad.vsum(v))
        assert q.grad == pytest.approx([0.0])

    @given(st.data())
    @settings(max_examples=40)
    def test_matches_scalar_schedule_value(self, data):
        from volauction.core import make_lot_grid, make_schedule, schedule_value

        m = data.draw(st.integers(2, 50))
        k = data.draw(st.integers(1, min(m, 4)))
        g = make_lot_grid(m, k)
        prices = sorted(
            data.draw(st.lists(st.floats(0.1, 30), min_size=k, max_size=k)),
            reverse=True)
        q = data.draw(st.floats(0, m))
        s = make_schedule(prices, m, g)
        t = GradientTape()
        qv = t.var(np.array([q]))
        v = ad.lot_value(np.asarray(prices)[None], qv, g.widths)
        assert v.value[0] == pytest.approx(schedule_value(s, q, g), rel=1e-12, abs=1e-9)
