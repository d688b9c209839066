import numpy as np
import pytest

from omnisurf.env import (
    ConfigurationError,
    EnvConfig,
    EnvStateError,
    JointAction,
    RewardConfig,
    SurfaceEnv,
    reward_from_sum_rate,
)
from omnisurf.ios import coefficient_matrices
from omnisurf.transceiver import evaluate_link, zf_precoder


def test_reward_branches():
    cfg = RewardConfig(10.0, 20.0)
    assert reward_from_sum_rate(12.0, cfg) == 12.0
    assert reward_from_sum_rate(9.9, cfg) == pytest.approx(-10.1)
    assert reward_from_sum_rate(10.0, cfg) - reward_from_sum_rate(np.nextafter(10.0, 0), cfg) \
        == pytest.approx(20.0)


def test_negative_penalty_rejected():
    with pytest.raises(ValueError):
        RewardConfig(10.0, -1.0)


def test_reset_is_reproducible():
    a = SurfaceEnv(EnvConfig(), seed=3).reset()
    b = SurfaceEnv(EnvConfig(), seed=3).reset()
    assert a.equals(b)


def test_reset_shapes_and_initial_coefficients():
    env = SurfaceEnv(EnvConfig(full_observation=True), seed=0)
    obs = env.reset()
    assert obs.h_hat.shape == (2, 5, 5)
    assert obs.phi_r_prev.shape == (2, 32, 32) and obs.phi_t_prev.shape == (2, 32, 32)
    br = env.catalog.amplitude_options[0].beta_r
    assert np.allclose(np.diagonal(obs.phi_r_prev[0]), br)
    assert np.array_equal(obs.phi_r_prev[1], np.zeros((32, 32)))
    compact = SurfaceEnv(EnvConfig(), seed=0).reset()
    assert compact.phi_r_prev.shape == (2, 32)


def test_step_before_reset():
    with pytest.raises(EnvStateError):
        SurfaceEnv(EnvConfig(), seed=0).step(JointAction(0, 0))


def test_action_out_of_range():
    env = SurfaceEnv(EnvConfig(), seed=0)
    env.reset()
    with pytest.raises(ValueError):
        env.step(JointAction(5, 0))


def test_action_count():
    env = SurfaceEnv(EnvConfig(), seed=0)
    n1, n2 = env.action_count()
    assert (n1, n2) == (5, 5) and n1 * n2 == 25 and n1 + n2 == 10


def test_invalid_config():
    with pytest.raises(ConfigurationError):
        SurfaceEnv(EnvConfig(n_bs=3), seed=0)
    with pytest.raises(ConfigurationError):
        SurfaceEnv(EnvConfig(protocol="XX"), seed=0)
    with pytest.raises(ConfigurationError):
        SurfaceEnv(EnvConfig(rician_factor=-1), seed=0)


def test_identity_action_keeps_coefficients():
    env = SurfaceEnv(EnvConfig(), seed=1)
    obs = env.reset()
    ident = env.catalog.increment_indices.index(0)
    nxt, _, _ = env.step(JointAction(ident, 0))
    assert np.array_equal(nxt.phi_r_prev, obs.phi_r_prev)
    assert np.array_equal(nxt.phi_t_prev, obs.phi_t_prev)


def test_observation_matches_applied_coefficients():
    env = SurfaceEnv(EnvConfig(full_observation=True, protocol="MS"), seed=2)
    env.reset()
    rng = np.random.default_rng(0)
    for _ in range(10):
        obs, r, link = env.step(JointAction(int(rng.integers(5)), int(rng.integers(5))))
        pr, pt = coefficient_matrices(env.phase, env.amplitude)
        assert np.array_equal(obs.phi_r_prev[0] + 1j * obs.phi_r_prev[1], pr)
        assert np.array_equal(obs.phi_t_prev[0] + 1j * obs.phi_t_prev[1], pt)
        assert r == reward_from_sum_rate(link.sum_rate, env.config.reward)


def test_trajectory_reproducible():
    def trace(seed):
        env = SurfaceEnv(EnvConfig(), seed=seed)
        env.reset()
        return [env.step(JointAction(i % 5, (i * 3) % 5))[1] for i in range(30)]
    assert trace(4) == trace(4)
    assert trace(4) != trace(5)


def test_reward_uses_true_channel_rate():
    env = SurfaceEnv(EnvConfig(), seed=6)
    env.reset()
    _, _, link = env.step(JointAction(2, 2))
    again = evaluate_link(zf_precoder(env.h_hat), env.H, env.config.sigma_k2)
    assert np.allclose(again.rate, link.rate)


def test_redraw_positions_switch():
    env = SurfaceEnv(EnvConfig(redraw_positions_each_slot=True), seed=0)
    env.reset()
    p0 = [u.position.copy() for u in env.ues]
    env.step(JointAction(0, 0))
    moved = [np.linalg.norm(u.position - p) for u, p in zip(env.ues, p0)]
    assert max(moved) > 2.0  # a fresh uniform draw, not a ~1 m step
