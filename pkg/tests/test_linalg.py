import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stac.linalg import (DegenerateStartError, LinearOperator, SolverBreakdownError, cg_solve,
                         conjugate_gradient, power_iteration)


def spd(rng, n, cond=50.0):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return q @ np.diag(np.geomspace(1.0, cond, n)) @ q.T


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_cg_matches_dense_solve(seed):
    r = np.random.default_rng(seed)
    A, b = spd(r, 10), r.normal(size=10)
    x, info = conjugate_gradient(LinearOperator.from_matrix(A), b, k=50, tol=1e-14)
    exact = np.linalg.solve(A, b)
    assert np.linalg.norm(x.numpy() - exact) <= 1e-8 * np.linalg.norm(exact)
    assert info.converged


def test_cg_exact_in_n_steps_and_regularized(rng):
    A, b = spd(rng, 6, 10.0), rng.normal(size=6)
    x, info = conjugate_gradient(LinearOperator.from_matrix(A), b, lam=0.7, k=6, tol=0.0)
    np.testing.assert_allclose(x.numpy(), np.linalg.solve(A + 0.7 * np.eye(6), b), rtol=1e-9)
    assert info.iterations == 6


def test_cg_respects_iteration_budget(rng):
    A, b = spd(rng, 10, 1e4), rng.normal(size=10)
    seen = []
    _, info = conjugate_gradient(LinearOperator.from_matrix(A), b, k=3, callback=lambda i, x: seen.append(i))
    assert info.iterations == 3 and seen == [0, 1, 2, 3]
    assert not info.converged


def test_cg_zero_rhs():
    x, info = conjugate_gradient(LinearOperator.from_matrix(np.eye(3)), np.zeros(3))
    assert info.iterations == 0 and x.abs().max() == 0.0


def test_cg_breakdown_on_singular():
    with pytest.raises(SolverBreakdownError):
        conjugate_gradient(LinearOperator.from_matrix(np.zeros((2, 2))), [1.0, 0.0])


def test_cg_rejects_negative_lambda():
    with pytest.raises(ValueError):
        conjugate_gradient(LinearOperator.from_matrix(np.eye(2)), [1.0, 1.0], lam=-1.0)


def test_operator_dimension_checks():
    op = LinearOperator.from_matrix(np.eye(3))
    with pytest.raises(ValueError):
        op([1.0, 2.0])
    with pytest.raises(ValueError):
        conjugate_gradient(op, [1.0])


def test_hessian_operator():
    op = LinearOperator.hessian(lambda x: (x[0] ** 2 * x[1]), [1.0, 2.0])
    np.testing.assert_allclose(op(torch.tensor([1.0, 0.0], dtype=torch.float64)).numpy(), [4.0, 2.0])
    assert cg_solve(op, [4.0, 2.0], k=5).numpy()[0] == pytest.approx(1.0)


def test_power_iteration(rng):
    A = np.diag([5.0, -1.0, 2.0])
    lam, v = power_iteration(LinearOperator.from_matrix(A), 200)
    assert lam == pytest.approx(5.0, rel=1e-8)
    assert abs(v[0]) == pytest.approx(1.0, rel=1e-8)


def test_power_iteration_degenerate():
    with pytest.raises(DegenerateStartError):
        power_iteration(LinearOperator.from_matrix(np.zeros((2, 2))), 3)
