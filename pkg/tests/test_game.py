import numpy as np
import pytest
import torch

from stac.examples import motivating_game, oracle_partials, oracle_total_derivative, quadratic_game
from stac.game import (Grid, IntegrationError, JointPoint, LeaderConfig, TwoPlayerGame, Verdict,
                       check_dse, individual_gradient, integrate, jacobian_spectrum, leader_total_derivative,
                       sample_vector_field, stackelberg_gradient, step)


def test_individual_gradient_declared_sense():
    d = individual_gradient(motivating_game(), JointPoint([0.5], [0.2]))
    p = oracle_partials(0.5, 0.2)
    assert d.d1[0] == pytest.approx(p["dJ_dtheta"])
    assert d.d2[0] == pytest.approx(p["dL_dw"])


@pytest.mark.parametrize("theta,w", [(0.5, 0.2), (-0.3, 0.7), (0.9, -0.9)])
@pytest.mark.parametrize("lam", [0.0, 0.5])
def test_stackelberg_matches_oracle(theta, w, lam):
    d = stackelberg_gradient(motivating_game(), JointPoint([theta], [w]), LeaderConfig(lam=lam))
    assert d.d1[0] == pytest.approx(oracle_total_derivative(theta, w, lam), abs=1e-9)
    assert d.d2[0] == pytest.approx(oracle_partials(theta, w)["dL_dw"], abs=1e-12)
    assert not d.fallback


def test_unregularized_closed_form():
    assert oracle_total_derivative(0.5, 0.2) == pytest.approx(-0.2 - 0.6 * 0.5)


def test_critic_leader_argument_order():
    # f1 = x1^2 + x1 x2, f2 = (x2 - x1)^2 with player 2 leading: total derivative of f2 in x2
    g = TwoPlayerGame(lambda a, b: (a ** 2 + a * b).sum(), lambda a, b: ((b - a) ** 2).sum(), (1, 1))
    x = JointPoint([0.3], [0.8])
    d = stackelberg_gradient(g, x, LeaderConfig(leader=2))
    # follower best response x1*(x2) = -x2/2, so f2(x1*(x2), x2) = (3/2 x2)^2 when fully anticipated
    # total derivative at a non-equilibrium point: d2f2 - d21f1 (d11f1)^-1 d1f2
    a, b = 0.3, 0.8
    own, d1f2 = 2 * (b - a), -2 * (b - a)
    expected = own - 1.0 * d1f2 / 2.0
    assert d.d2[0] == pytest.approx(expected)
    assert d.d1[0] == pytest.approx(2 * a + b)


def test_leader_total_derivative_fallback_on_singular():
    lead = lambda a, b: (a * b).sum()
    foll = lambda a, b: (a * b).sum()  # zero follower Hessian
    d, info, corr, fb = leader_total_derivative(lead, foll, [1.0], [1.0], 0.0, 10, 1e-10)
    assert fb and d[0] == 1.0 and corr == 0.0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        individual_gradient(motivating_game(), JointPoint([0.1, 0.2], [0.3]))


def test_step_unrolls_follower_against_old_leader():
    g = motivating_game()
    x = JointPoint([0.5], [0.2])
    cfg = LeaderConfig(unroll_m=3)
    nxt, _ = step(g, x, "stackelberg", cfg, 0.1, 0.1)
    w = 0.2
    for _ in range(3):
        w -= 0.1 * oracle_partials(0.5, w)["dL_dw"]
    assert nxt.x2[0] == pytest.approx(w)
    assert nxt.x1[0] == pytest.approx(0.5 + 0.1 * oracle_total_derivative(0.5, 0.2))


def test_integrate_lengths_and_validation():
    g = motivating_game()
    traj = integrate(g, JointPoint([0.5], [0.5]), "individual", LeaderConfig(), 0.05, 0.05, 10)
    assert len(traj) == 11
    with pytest.raises(ValueError):
        integrate(g, traj[0], "individual", LeaderConfig(), 0.0, 0.05, 10)
    with pytest.raises(ValueError):
        step(g, traj[0], "sideways", LeaderConfig(), 0.1, 0.1)


def test_integration_error_reports_step():
    g = TwoPlayerGame(lambda a, b: (a ** 4).sum(), lambda a, b: (b ** 2).sum(), (1, 1))
    with pytest.raises(IntegrationError) as err:
        integrate(g, JointPoint([2.0], [0.0]), "individual", LeaderConfig(), 1.0, 1.0, 50)
    assert 0 < err.value.step < 50


def test_vector_field_grid():
    rows = sample_vector_field(motivating_game(), "individual", LeaderConfig(), Grid.square(-1, 1, 5))
    assert len(rows) == 25
    r = next(r for r in rows if (r.x1, r.x2) == (0.5, 0.5))
    assert r.dx1 == pytest.approx(0.5)
    assert r.dx2 == pytest.approx(-oracle_partials(0.5, 0.5)["dL_dw"])


def test_vector_field_motion_sign_example():
    rows = sample_vector_field(motivating_game(), "stackelberg", LeaderConfig(), Grid.square(0.5, 0.5, 1))
    assert rows[0].dx1 == pytest.approx(-0.8)


def test_leader_config_validation():
    with pytest.raises(ValueError):
        LeaderConfig(leader=3)
    with pytest.raises(ValueError):
        LeaderConfig(lam=-1)


class TestDSE:
    def test_quadratic_origin_is_dse(self):
        rep = check_dse(quadratic_game(), JointPoint([0.0], [0.0]))
        assert rep.verdict is Verdict.DSE
        np.testing.assert_allclose(rep.follower_hessian_eigs, [2.0])
        np.testing.assert_allclose(rep.leader_hessian_eigs_sym, [2.0], rtol=1e-6)

    def test_motivating_origin_degenerate(self):
        assert check_dse(motivating_game(), JointPoint([0.0], [0.0])).verdict is Verdict.DEGENERATE

    def test_non_stationary(self):
        assert check_dse(quadratic_game(), JointPoint([0.5], [0.5])).verdict is Verdict.NON_STATIONARY
        assert check_dse(quadratic_game(), JointPoint([0.5], [0.0])).verdict is Verdict.NON_STATIONARY

    def test_follower_not_minimizing(self):
        g = TwoPlayerGame(lambda a, b: (a ** 2).sum(), lambda a, b: (-(b ** 2)).sum(), (1, 1))
        rep = check_dse(g, JointPoint([0.0], [0.0]))
        assert rep.verdict is Verdict.DEGENERATE


def test_jacobian_spectrum_quadratic_stable():
    eig = jacobian_spectrum(quadratic_game(), JointPoint([0.0], [0.0]), "stackelberg", LeaderConfig())
    assert np.all(eig.real < 0)
