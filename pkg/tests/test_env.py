import math

import numpy as np
import pytest

from stac.env import (Box, CartPole, Discrete, FiniteMDP, MDPSpec, OneStepEnv, Pendulum, SizeBoundError,
                      Trajectory, Transition, cartpole_step, enumerate_trajectories, enumerated_q, make_env,
                      pendulum_step, wrap_angle)


def test_make_env_names():
    assert isinstance(make_env("cartpole"), CartPole)
    assert isinstance(make_env("pendulum"), Pendulum)
    assert isinstance(make_env("one-step"), OneStepEnv)
    with pytest.raises(KeyError):
        make_env("mountaincar")


def test_spec_validation():
    with pytest.raises(ValueError):
        MDPSpec("x", 1, Discrete(2), 0.0, 10)
    assert MDPSpec("x", 1, Discrete(2), 0.9, 10).discrete
    assert not MDPSpec("x", 1, Box(-1, 1), 0.9, 10).discrete


def test_one_step_reward():
    env = OneStepEnv()
    env.reset(np.random.default_rng(0))
    s, r, done, trunc = env.step([0.5])
    assert r == pytest.approx(-0.05) and done and not trunc
    assert env.step([3.0])[1] == pytest.approx(-0.2)  # clipped to the action box


class TestCartPole:
    def test_reference_step(self):
        # hand-computed Euler step from rest with the pole upright, pushing right
        s, r, done = cartpole_step(np.zeros(4), 1)
        temp = 10.0 / 1.1
        theta_acc = -temp / (0.5 * (4 / 3 - 0.1 / 1.1))
        x_acc = temp - 0.05 * theta_acc / 1.1
        np.testing.assert_allclose(s, [0.0, 0.02 * x_acc, 0.0, 0.02 * theta_acc])
        assert r == 1.0 and not done

    def test_terminates_on_angle(self):
        _, _, done = cartpole_step([0.0, 0.0, 0.21, 0.0], 0)
        assert done

    def test_truncates_at_horizon(self):
        env = CartPole(horizon=5)
        env.reset(np.random.default_rng(0))
        flags = [env.step(t % 2)[3] for t in range(5)]
        assert flags == [False] * 4 + [True]

    def test_reset_range(self):
        s = CartPole().reset(np.random.default_rng(1))
        assert np.all(np.abs(s) <= 0.05)


class TestPendulum:
    def test_wrap_angle(self):
        assert wrap_angle(math.pi) == pytest.approx(-math.pi)
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)

    def test_upright_at_rest_is_fixed_point(self):
        s, r, done = pendulum_step([0.0, 0.0], 0.0)
        np.testing.assert_allclose(s, [0.0, 0.0])
        assert r == 0.0 and not done

    def test_cost_and_clip(self):
        _, r, _ = pendulum_step([math.pi / 2, 1.0], 5.0)
        assert r == pytest.approx(-((math.pi / 2) ** 2 + 0.1 + 0.001 * 4.0))

    def test_speed_clipped(self):
        s, _, _ = pendulum_step([math.pi / 2, 7.9], 2.0)
        assert s[1] == 8.0

    def test_observation_and_horizon(self):
        env = Pendulum(horizon=3)
        o = env.reset(np.random.default_rng(0))
        assert o[0] ** 2 + o[1] ** 2 == pytest.approx(1.0)
        assert [env.step([0.0])[3] for _ in range(3)] == [False, False, True]


def test_trajectory_chaining():
    tr = Trajectory()
    tr.append(Transition(np.zeros(1), 0, 1.0, np.ones(1), False))
    with pytest.raises(ValueError):
        tr.append(Transition(np.zeros(1), 0, 1.0, np.ones(1), False))
    tr.append(Transition(np.ones(1), 0, 2.0, np.ones(1), True))
    assert tr.ret == 3.0 and tr.terminal and len(tr) == 2


class TestFiniteMDP:
    def test_enumeration_probabilities_sum_to_one(self, rng):
        m = FiniteMDP.random(rng, 3, 2, 3)
        pi = rng.dirichlet(np.ones(2), size=3)
        trajs = enumerate_trajectories(m, pi)
        assert sum(t.prob for t in trajs) == pytest.approx(1.0, abs=1e-12)
        assert all(len(t.states) == 3 for t in trajs)

    def test_values_match_enumeration(self, rng):
        m = FiniteMDP.random(rng, 2, 3, 3)
        pi = rng.dirichlet(np.ones(3), size=2)
        Q, V = m.values(pi)
        Qe = enumerated_q(m, pi)
        mask = ~np.isnan(Qe)
        np.testing.assert_allclose(Qe[mask], Q[mask], atol=1e-12)
        ret = sum(t.prob * sum(m.gamma ** k * r for k, r in enumerate(t.rewards))
                  for t in enumerate_trajectories(m, pi))
        assert ret == pytest.approx(float(m.rho @ V[0]), abs=1e-12)

    def test_size_bound(self, rng):
        m = FiniteMDP.random(rng, 4, 2, 2)
        with pytest.raises(SizeBoundError):
            enumerate_trajectories(m, np.full((4, 2), 0.5))

    def test_invalid_transitions(self):
        with pytest.raises(ValueError):
            FiniteMDP(np.ones((1, 1, 2)), np.zeros((1, 1)), [1.0], 1)

    def test_policy_shape(self, rng):
        m = FiniteMDP.random(rng, 2, 2, 2)
        with pytest.raises(ValueError):
            enumerate_trajectories(m, np.full((2, 3), 1 / 3))
