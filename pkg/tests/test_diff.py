import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stac.diff import (HessianVectorProduct, MixedProduct, NumericOverflowError, ParamVector, Segment,
                       finite_difference_gradient, gradient, hvp, minimum, mixed_vjp, partial_gradients,
                       value_and_gradient)


def rosen(x):
    return ((1 - x[:-1]) ** 2 + 100 * (x[1:] - x[:-1] ** 2) ** 2).sum()


def coupled(a, b):
    return (torch.sin(a).sum() * (b ** 2).sum() + (a[0] * b[-1]) ** 3 + torch.tanh(a @ b[:len(a)]))


vectors = st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=5)


class TestParamVector:
    def test_pack_roundtrip(self):
        p = ParamVector.pack({"W": np.arange(6.0).reshape(2, 3), "b": [7.0, 8.0]})
        assert len(p) == 8
        assert p.segment("W").shape == (2, 3)
        assert p.unpack()["b"].tolist() == [7.0, 8.0]

    def test_layout_mismatch(self):
        with pytest.raises(ValueError):
            ParamVector([1.0, 2.0], [Segment("x", (3,), 0)])

    def test_arithmetic_keeps_layout(self):
        p = ParamVector.pack({"a": [1.0, 2.0], "b": [3.0]})
        q = 2.0 * p - p + p * 0.5
        assert q.layout == p.layout
        np.testing.assert_allclose(q.numpy(), [1.5, 3.0, 4.5])

    def test_unknown_segment(self):
        with pytest.raises(KeyError):
            ParamVector([1.0]).segment("nope")


class TestGradients:
    def test_value_and_gradient_known(self):
        v, g = value_and_gradient(lambda x: (x ** 2).sum(), [1.0, -2.0])
        assert v == 5.0
        np.testing.assert_allclose(g.numpy(), [2.0, -4.0])

    @settings(max_examples=25, deadline=None)
    @given(vectors)
    def test_gradient_matches_fd(self, xs):
        g = gradient(rosen, xs).numpy()
        fd = finite_difference_gradient(rosen, xs, h=1e-6)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-4)

    def test_partials_unused_argument_is_zero(self):
        ga, gb = partial_gradients(lambda a, b: (a ** 2).sum(), [1.0, 2.0], [3.0])
        np.testing.assert_allclose(gb.numpy(), [0.0])
        np.testing.assert_allclose(ga.numpy(), [2.0, 4.0])

    def test_nonfinite_value_raises(self):
        with pytest.raises(NumericOverflowError):
            gradient(lambda x: torch.log(x).sum(), [-1.0])

    def test_layout_preserved(self):
        p = ParamVector.pack({"a": [1.0], "b": [2.0, 3.0]})
        assert gradient(lambda x: x.sum(), p).layout == p.layout


class TestSecondOrder:
    @settings(max_examples=20, deadline=None)
    @given(vectors, st.integers(0, 2**31))
    def test_hvp_matches_fd_of_gradient(self, xs, seed):
        v = np.random.default_rng(seed).normal(size=len(xs))
        h = 1e-6
        x = np.array(xs)
        fd = (gradient(rosen, x + h * v).numpy() - gradient(rosen, x - h * v).numpy()) / (2 * h)
        np.testing.assert_allclose(hvp(rosen, xs, v).numpy(), fd, rtol=1e-4, atol=1e-4)

    @settings(max_examples=20, deadline=None)
    @given(vectors, st.integers(0, 2**31))
    def test_hvp_symmetry(self, xs, seed):
        r = np.random.default_rng(seed)
        u, v = r.normal(size=len(xs)), r.normal(size=len(xs))
        H = HessianVectorProduct(rosen, xs)
        assert abs(float(u @ H(v).numpy()) - float(v @ H(u).numpy())) <= 1e-8 * max(1.0, np.abs(H(v).numpy()).max())

    def test_mixed_vjp_matches_fd(self, rng):
        a, b, q = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
        got = mixed_vjp(coupled, a, b, q).numpy()

        def inner(x):
            _, gb = partial_gradients(coupled, x, b)
            return gb.data @ torch.as_tensor(q)

        fd = finite_difference_gradient(inner, a, h=1e-6)
        np.testing.assert_allclose(got, fd, rtol=1e-4, atol=1e-6)

    def test_mixed_product_reuse(self, rng):
        a, b = rng.normal(size=3), rng.normal(size=4)
        mp = MixedProduct(coupled, a, b)
        q1, q2 = rng.normal(size=4), rng.normal(size=4)
        np.testing.assert_allclose((mp(q1) + mp(q2)).numpy(), mp(q1 + q2).numpy(), atol=1e-12)

    def test_hvp_length_check(self):
        with pytest.raises(ValueError):
            hvp(rosen, [1.0, 2.0], [1.0])

    def test_linear_function_has_zero_hessian(self):
        np.testing.assert_allclose(hvp(lambda x: 3 * x.sum(), [1.0, 2.0], [1.0, 1.0]).numpy(), 0.0)

    def test_relu_second_derivative_zero(self):
        f = lambda x: torch.relu(x).sum() * 2.0
        np.testing.assert_allclose(hvp(f, [0.5, -0.5], [1.0, 1.0]).numpy(), 0.0)


def test_minimum_tie_goes_left():
    a = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    b = torch.tensor([1.0, 1.0], dtype=torch.float64, requires_grad=True)
    minimum(a, b).sum().backward()
    assert a.grad.tolist() == [1.0, 0.0]
    assert b.grad.tolist() == [0.0, 1.0]
