import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnisurf.agent import (
    AgentConfig,
    BranchingAgent,
    BranchQ,
    Experience,
    ReplayBuffer,
    act_only,
    compute_loss,
    obs_inputs,
    select_action,
    select_joint_action,
)
from omnisurf.env import EnvConfig, JointAction, SurfaceEnv
from omnisurf.neural import numerical_gradient


@pytest.fixture(scope="module")
def transitions():
    env = SurfaceEnv(EnvConfig(), seed=11)
    rng = np.random.default_rng(0)
    obs = env.reset()
    out = []
    for _ in range(40):
        a = JointAction(int(rng.integers(5)), int(rng.integers(5)))
        nxt, r, _ = env.step(a)
        out.append(Experience(obs, a, r, nxt))
        obs = nxt
    return out


def _agent(**kw):
    return BranchingAgent(5, 32, 5, 5, AgentConfig(**kw), seed=0)


def test_q_value_shapes(transitions):
    q = _agent().q_values(transitions[0].state)
    assert q.q1.shape == (5,) and q.q2.shape == (5,)
    flat = _agent(branching=False).q_values(transitions[0].state)
    assert flat.shape == (25,)


def test_zero_weights_give_zero_q(transitions):
    agent = _agent()
    agent.theta[:] = 0
    q = agent.q_values(transitions[0].state)
    assert not np.any(q.q1) and not np.any(q.q2)


def test_select_action_examples():
    rng = np.random.default_rng(0)
    q = BranchQ(np.array([0.1, 0.9, 0.3, 0.2, 0.0]), np.array([0.5, 0.4, 0.6, 0.1, 0.2]))
    assert select_action(q, 0.0, rng) == JointAction(1, 2)
    with pytest.raises(ValueError):
        select_action(q, 1.5, rng)


def test_ties_break_to_lowest_index():
    rng = np.random.default_rng(0)
    assert select_action(BranchQ(np.ones(5), np.ones(5)), 0.0, rng) == JointAction(0, 0)
    assert select_joint_action(np.ones(25), 5, 0.0, rng) == JointAction(0, 0)


def test_full_exploration_is_uniform():
    rng = np.random.default_rng(1)
    q = BranchQ(np.arange(5.0), np.arange(5.0))
    n = 50_000
    counts = np.zeros((2, 5))
    for _ in range(n):
        a = select_action(q, 1.0, rng)
        counts[0, a.increment_index] += 1
        counts[1, a.amplitude_index] += 1
    assert np.all(np.abs(counts / n - 0.2) < 0.02 * 0.2 * 5)


def test_joint_index_decoding():
    rng = np.random.default_rng(0)
    q = np.zeros(25)
    q[13] = 1.0
    assert select_joint_action(q, 5, 0.0, rng) == JointAction(2, 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=5, max_size=5),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_greedy_choice_invariant_to_positive_affine_map(q1, a, b):
    q1 = np.array(q1)
    q2 = q1[::-1].copy()
    rng = np.random.default_rng(0)
    base = select_action(BranchQ(q1, q2), 0.0, rng)
    moved = select_action(BranchQ(a * q1 + b, a * q2 + b), 0.0, rng)
    # equal up to float ties created by the map
    assert q1[moved.increment_index] == pytest.approx(q1[base.increment_index])
    assert q2[moved.amplitude_index] == pytest.approx(q2[base.amplitude_index])


def test_replay_buffer_fifo(transitions):
    buf = ReplayBuffer(3)
    for e in transitions[:5]:
        buf.store(e)
    assert len(buf) == 3
    assert [buf[i] for i in range(3)] == transitions[2:5]
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_default_table_values():
    cfg = AgentConfig()
    assert (cfg.gamma, cfg.lr, cfg.buffer_capacity, cfg.batch_size, cfg.target_period) == \
        (0.95, 0.001, 10000, 8, 20)
    assert cfg.epsilon(0) == 1.0
    assert cfg.epsilon(10) == pytest.approx(0.99 ** 10)
    assert cfg.epsilon(10_000) == 0.001
    with pytest.raises(ValueError):
        AgentConfig(batch_size=20, buffer_capacity=10)


def test_loss_oracle_zero_network(transitions):
    # Q = 0 everywhere, r = 1: each branch error is 1, summed error 2, loss 4.
    agent = _agent()
    agent.theta[:] = 0
    e = replace(transitions[0], reward=1.0)
    loss, grad = agent.compute_loss([e], agent.theta, agent.theta)
    assert loss == 4.0
    _, grad_ms = compute_loss(agent.net, agent.theta, agent.theta, [e],
                              replace(agent.config, loss_mode="mean_squares"), 5)
    assert agent.compute_loss([e], agent.theta, agent.theta)[0] == 4.0
    assert grad.shape == grad_ms.shape


def _loss_by_loops(agent, batch):
    total = 0.0
    g = agent.config.gamma
    for e in batch:
        q = agent.q_values(e.state, agent.theta)
        qn = agent.q_values(e.next_state, agent.theta_target)
        d1 = e.reward + g * max(qn.q1) - q.q1[e.action.increment_index]
        d2 = e.reward + g * max(qn.q2) - q.q2[e.action.amplitude_index]
        total += (d1 + d2) ** 2
    return total / len(batch)


def test_loss_matches_loop_implementation(transitions):
    agent = _agent()
    rng = np.random.default_rng(3)
    agent.theta_target = agent.net.init_params(rng)
    batch = transitions[:8]
    assert agent.compute_loss(batch)[0] == pytest.approx(_loss_by_loops(agent, batch), rel=1e-10)


@pytest.mark.parametrize("mode", ["summed", "mean_squares"])
@pytest.mark.parametrize("branching", [True, False])
def test_loss_gradient_numeric(transitions, mode, branching):
    cfg = AgentConfig(hidden=8, loss_mode=mode, branching=branching)
    agent = BranchingAgent(5, 32, 5, 5, cfg, seed=4)
    agent.theta_target = agent.net.init_params(np.random.default_rng(9))
    batch = transitions[:4]
    _, grad = agent.compute_loss(batch)
    rng = np.random.default_rng(5)
    idx = rng.choice(agent.theta.size, 60, replace=False)
    f = lambda th: agent.compute_loss(batch, th)[0]
    num = numerical_gradient(f, agent.theta.copy(), 1e-5, idx)
    for i in idx:
        scale = max(1e-6, abs(num[i]), abs(grad[i]))
        assert abs(num[i] - grad[i]) / scale < 1e-4


def test_target_sync_every_period(transitions):
    agent = _agent(target_period=20)
    for e in transitions:
        agent.store(e)
    rng = np.random.default_rng(0)
    start = agent.theta_target.copy()
    for _ in range(19):
        agent.train_step(rng)
    assert np.array_equal(agent.theta_target, start)
    agent.train_step(rng)
    assert np.array_equal(agent.theta_target, agent.theta)


def test_train_skips_short_buffer(transitions):
    agent = _agent()
    agent.store(transitions[0])
    assert agent.train_step(np.random.default_rng(0)) is None
    assert agent.skipped == 1


def test_zero_learning_rate_freezes(transitions):
    agent = _agent(lr=0.0)
    for e in transitions:
        agent.store(e)
    before = agent.theta.copy()
    agent.train_step(np.random.default_rng(0))
    assert np.array_equal(agent.theta, before)


def test_frozen_batch_loss_decreases(transitions):
    agent = _agent(lr=1e-4, target_period=10**9)
    batch = transitions[:8]
    losses = []
    for _ in range(15):
        loss, grad = agent.compute_loss(batch)
        losses.append(loss)
        agent.opt.step(agent.theta, grad)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_act_only_matches_and_is_fast(transitions):
    agent = _agent()
    obs = transitions[0].state
    theta = agent.snapshot()
    a1 = act_only(agent, theta, obs, 0.0, np.random.default_rng(0))
    q = agent.q_values(obs)
    assert a1 == JointAction(int(np.argmax(q.q1)), int(np.argmax(q.q2)))
    assert agent.decisions == 0
    t0 = time.perf_counter()
    for _ in range(20):
        act_only(agent, theta, obs, 0.0, np.random.default_rng(0))
    assert (time.perf_counter() - t0) / 20 < 0.010


def test_snapshot_is_read_only():
    agent = _agent()
    snap = agent.snapshot()
    with pytest.raises(ValueError):
        snap[0] = 1.0
    agent.theta[0] += 1.0
    assert snap[0] != agent.theta[0]


def test_obs_inputs_layouts(transitions):
    obs = [e.state for e in transitions[:3]]
    x = obs_inputs(obs, AgentConfig())
    assert x["h"].shape == (3, 5, 10)
    assert x["phi_r"].shape == (3, 32, 2)
    y = obs_inputs(obs, AgentConfig(coeff_sequence="single"))
    assert y["phi_t"].shape == (3, 1, 64)
    # single-step rows interleave (re, im) per element
    assert np.array_equal(y["phi_r"][:, 0, 0::2], x["phi_r"][:, :, 0])


def test_head_sizes_scale_with_catalog(transitions):
    agent = BranchingAgent(5, 32, 3, 5, AgentConfig(), seed=0)
    q = agent.q_values(transitions[0].state)
    assert q.q1.shape == (3,) and q.q2.shape == (5,)
