import math

import numpy as np
import pytest
import torch

from stac.diff import partial_gradients
from stac.examples import (EntropicGame, SingularityError, entropic_actor_objective_grad, error_curve,
                           motivating_game, oracle_partials, oracle_total_derivative, settling_step,
                           steps_to_error, winding_angle)
from stac.game import JointPoint, stackelberg_gradient, LeaderConfig


@pytest.mark.parametrize("theta,w", [(0.5, 0.2), (-0.4, 0.9), (0.1, -0.3)])
def test_oracle_partials_match_autodiff(theta, w):
    g = motivating_game()
    p = oracle_partials(theta, w)
    dJt, dJw = partial_gradients(g.f1, [theta], [w])
    _, dLw = partial_gradients(g.f2, [theta], [w])
    assert dJt[0] == pytest.approx(p["dJ_dtheta"])
    assert dJw[0] == pytest.approx(p["dJ_dw"])
    assert dLw[0] == pytest.approx(p["dL_dw"])
    h = 1e-6
    _, up = partial_gradients(g.f2, [theta + h], [w])
    _, dn = partial_gradients(g.f2, [theta - h], [w])
    assert (up[0] - dn[0]) / (2 * h) == pytest.approx(p["d2L_dwdtheta"], rel=1e-6)
    _, up = partial_gradients(g.f2, [theta], [w + h])
    _, dn = partial_gradients(g.f2, [theta], [w - h])
    assert (up[0] - dn[0]) / (2 * h) == pytest.approx(p["d2L_dw2"], rel=1e-6)


def test_total_derivative_worked_example():
    # at (0.5, 0.2): -0.2 - 0.3
    assert oracle_total_derivative(0.5, 0.2) == pytest.approx(-0.5)


def test_oracle_singular_at_theta_zero():
    with pytest.raises(SingularityError):
        oracle_total_derivative(0.0, 0.3)
    assert oracle_total_derivative(0.0, 0.3, lam=1.0) == pytest.approx(0.3)


def test_regularization_interpolates():
    th, w = 0.5, 0.2
    assert oracle_total_derivative(th, w, 1e12) == pytest.approx(w, abs=1e-9)
    d = stackelberg_gradient(motivating_game(), JointPoint([th], [w]), LeaderConfig(lam=1e12))
    assert d.d1[0] == pytest.approx(w, abs=1e-9)


def test_entropic_gradient_against_fd():
    cfg = EntropicGame(mc_samples=64)
    g = cfg.game(3)
    dth, dw = entropic_actor_objective_grad(0.3, -0.2, cfg, seed=3)
    h = 1e-6
    with torch.no_grad():
        f1 = lambda t: float(g.f1(torch.tensor([t], dtype=torch.float64), torch.tensor([-0.2], dtype=torch.float64)))
        f2 = lambda w: float(g.f2(torch.tensor([0.3], dtype=torch.float64), torch.tensor([w], dtype=torch.float64)))
    assert dth == pytest.approx((f1(0.3 + h) - f1(0.3 - h)) / (2 * h), rel=1e-6)
    assert dw == pytest.approx((f2(-0.2 + h) - f2(-0.2 - h)) / (2 * h), rel=1e-6)


def test_entropic_log_prob_is_density():
    cfg = EntropicGame(sigma=0.5)
    eps = torch.linspace(-8, 8, 20001, dtype=torch.float64)
    a, u = cfg.actions(torch.tensor(0.3, dtype=torch.float64), eps)
    dens = torch.exp(cfg.log_prob(u, eps))
    # integrate the action density over a via the change of variables
    da = torch.diff(a)
    mass = float((0.5 * (dens[1:] + dens[:-1]) * da).sum())
    assert mass == pytest.approx(1.0, abs=1e-4)


def test_entropic_common_random_numbers():
    cfg = EntropicGame()
    assert torch.equal(cfg.noise(5), cfg.noise(5))
    assert not torch.equal(cfg.noise(5), cfg.noise(6))
    with pytest.raises(ValueError):
        EntropicGame(mc_samples=0)


def test_curve_helpers():
    traj = [JointPoint([1.0], [0.0]), JointPoint([0.0], [1.0]), JointPoint([-0.01], [0.0]),
            JointPoint([0.0], [-0.001])]
    np.testing.assert_allclose(error_curve(traj), [1.0, 1.0, 1e-4, 1e-6])
    assert steps_to_error(traj, 1e-3) == 2
    assert steps_to_error(traj, 1e-9) is None
    assert settling_step(traj, 1e-3, min_tail=2) == 2
    assert settling_step(traj, 1e-3, min_tail=3) is None
    assert winding_angle(traj) == pytest.approx(1.5 * math.pi)
