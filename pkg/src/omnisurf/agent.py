"""Branching deep-Q agent for the surface controller.

The Q-network has one GRU + FC tower per observation component (estimated
channel, previous reflect coefficients, previous refract coefficients), a
concatenation, and one FC + output head per sub-action. Without branching a
single head scores every joint action.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .env import JointAction, Observation
from .neural import SGD, Dense, GRU, Network


@dataclass
class AgentConfig:
    gamma: float = 0.95
    lr: float = 0.001
    buffer_capacity: int = 10000
    batch_size: int = 8
    target_period: int = 20
    eps_floor: float = 0.001
    eps_decay: float = 0.99
    hidden: int = 64
    branching: bool = True
    # "summed": square of the summed branch TD errors; "mean_squares": mean of per-branch squares.
    loss_mode: str = "summed"
    output_activation: str = "linear"
    # How coefficient diagonals enter their GRU: "sequence" (M steps of 2) or "single" (1 step of 2M).
    coeff_sequence: str = "sequence"
    channel_scale: float = 0.2
    reward_scale: float = 1.0
    momentum: float = 0.0
    # Global gradient-norm cap; None is plain SGD.
    grad_clip: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size cannot exceed buffer_capacity")
        if self.loss_mode not in ("summed", "mean_squares"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.coeff_sequence not in ("sequence", "single"):
            raise ValueError(f"unknown coeff_sequence {self.coeff_sequence!r}")

    def epsilon(self, step: int) -> float:
        return max(self.eps_floor, self.eps_decay ** step)


@dataclass(frozen=True)
class BranchQ:
    q1: np.ndarray
    q2: np.ndarray


@dataclass(frozen=True)
class Experience:
    state: Observation
    action: JointAction
    reward: float
    next_state: Observation


# ---------------------------------------------------------------------------
# observation -> network inputs

def obs_inputs(observations, cfg: AgentConfig) -> dict:
    """Stack observations into the three tower inputs.

    Channel: ``(B, K, 2N)``, one step per UE. Coefficients: ``(B, M, 2)``
    per element, or ``(B, 1, 2M)`` in single-step mode.
    """
    obs = [o.compact() for o in observations]
    h = np.stack([o.h_hat for o in obs])                  # B, 2, N, K
    b, _, n, k = h.shape
    h = h.transpose(0, 3, 1, 2).reshape(b, k, 2 * n) * cfg.channel_scale
    pr = np.stack([o.phi_r_prev for o in obs]).transpose(0, 2, 1)   # B, M, 2
    pt = np.stack([o.phi_t_prev for o in obs]).transpose(0, 2, 1)
    if cfg.coeff_sequence == "single":
        pr = pr.reshape(b, 1, -1)
        pt = pt.reshape(b, 1, -1)
    return {"h": h, "phi_r": pr, "phi_t": pt}


def build_q_network(n_bs: int, n_elements: int, n1: int, n2: int,
                    cfg: AgentConfig) -> Network:
    w = cfg.hidden
    coeff_in = 2 if cfg.coeff_sequence == "sequence" else 2 * n_elements
    towers = {
        "h": [GRU(2 * n_bs, w), Dense(w, w)],
        "phi_r": [GRU(coeff_in, w), Dense(w, w)],
        "phi_t": [GRU(coeff_in, w), Dense(w, w)],
    }
    act = cfg.output_activation
    if cfg.branching:
        heads = {"q1": [Dense(3 * w, w), Dense(w, n1, act)],
                 "q2": [Dense(3 * w, w), Dense(w, n2, act)]}
    else:
        heads = {"q": [Dense(3 * w, w), Dense(w, n1 * n2, act)]}
    return Network(towers, heads)


# ---------------------------------------------------------------------------
# action selection

def _argmax(q):
    # np.argmax already returns the lowest index among ties.
    return int(np.argmax(q))


def select_action(q: BranchQ, epsilon: float, rng: np.random.Generator) -> JointAction:
    """Independent epsilon-greedy choice on each branch."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    a1 = int(rng.integers(len(q.q1))) if rng.random() < epsilon else _argmax(q.q1)
    a2 = int(rng.integers(len(q.q2))) if rng.random() < epsilon else _argmax(q.q2)
    return JointAction(a1, a2)


def select_joint_action(q: np.ndarray, n2: int, epsilon: float,
                        rng: np.random.Generator) -> JointAction:
    """Epsilon-greedy over a flat joint head (index = a1 * n2 + a2)."""
    j = int(rng.integers(len(q))) if rng.random() < epsilon else _argmax(q)
    return JointAction(j // n2, j % n2)


# ---------------------------------------------------------------------------
# replay

class ReplayBuffer:
    """FIFO experience buffer sampled uniformly with replacement."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def store(self, exp: Experience):
        self._items.append(exp)

    def sample(self, n: int, rng: np.random.Generator) -> list[Experience]:
        idx = rng.integers(len(self._items), size=n)
        return [self._items[i] for i in idx]


# ---------------------------------------------------------------------------
# agent

class BranchingAgent:
    """Online network, target network, replay buffer and SGD optimizer."""

    def __init__(self, n_bs: int, n_elements: int, n1: int, n2: int,
                 config: AgentConfig | None = None, seed: int | None = 0):
        self.config = config or AgentConfig()
        self.n1, self.n2 = n1, n2
        self.net = build_q_network(n_bs, n_elements, n1, n2, self.config)
        self.theta = self.net.init_params(np.random.default_rng(seed))
        self.theta_target = self.theta.copy()
        self.buffer = ReplayBuffer(self.config.buffer_capacity)
        self.opt = SGD(self.config.lr, self.config.momentum, self.config.grad_clip)
        self.train_steps = 0
        self.skipped = 0
        self.decisions = 0

    @property
    def branching(self) -> bool:
        return self.config.branching

    # -- acting --------------------------------------------------------------
    def q_values(self, obs: Observation, theta=None):
        theta = self.theta if theta is None else theta
        out = self.net(theta, obs_inputs([obs], self.config))
        if self.branching:
            return BranchQ(out["q1"][0], out["q2"][0])
        return out["q"][0]

    def select(self, q, epsilon, rng) -> JointAction:
        if self.branching:
            return select_action(q, epsilon, rng)
        return select_joint_action(q, self.n2, epsilon, rng)

    def act(self, obs: Observation, rng: np.random.Generator) -> JointAction:
        """Epsilon-greedy decision; epsilon decays with the decision count."""
        eps = self.config.epsilon(self.decisions)
        self.decisions += 1
        return self.select(self.q_values(obs), eps, rng)

    def store(self, exp: Experience):
        self.buffer.store(exp)

    # -- learning ------------------------------------------------------------
    def compute_loss(self, batch, theta=None, theta_target=None):
        return compute_loss(self.net, self.theta if theta is None else theta,
                            self.theta_target if theta_target is None else theta_target,
                            batch, self.config, self.n2)

    def train_step(self, rng: np.random.Generator) -> dict | None:
        """One SGD step on a sampled mini-batch; ``None`` if the buffer is short."""
        cfg = self.config
        if len(self.buffer) < cfg.batch_size:
            self.skipped += 1
            return None
        batch = self.buffer.sample(cfg.batch_size, rng)
        loss, grad = self.compute_loss(batch)
        self.opt.step(self.theta, grad)
        self.train_steps += 1
        if self.train_steps % cfg.target_period == 0:
            self.sync_target()
        return {"step": self.train_steps, "loss": loss,
                "epsilon": cfg.epsilon(self.decisions), "buffer": len(self.buffer)}

    def sync_target(self):
        self.theta_target = self.theta.copy()

    def snapshot(self) -> np.ndarray:
        """Immutable copy of the online parameters for delivery."""
        snap = self.theta.copy()
        snap.setflags(write=False)
        return snap


def compute_loss(net: Network, theta, theta_target, batch, cfg: AgentConfig, n2: int = 0):
    """TD loss and its gradient w.r.t. the online parameters.

    Branching, "summed": ``mean_i (d1_i + d2_i)^2`` with
    ``d_b = r + gamma max_a Q_b(s', a; target) - Q_b(s, a_b; online)``.
    Target terms are constants.
    """
    if not batch:
        raise ValueError("empty batch")
    n = len(batch)
    s = obs_inputs([e.state for e in batch], cfg)
    s2 = obs_inputs([e.next_state for e in batch], cfg)
    r = np.array([e.reward for e in batch]) * cfg.reward_scale
    rows = np.arange(n)
    q_next = net(theta_target, s2)
    out, cache = net.forward(theta, s)
    if "q" in out:
        a = np.array([e.action.increment_index * n2 + e.action.amplitude_index for e in batch])
        y = r + cfg.gamma * q_next["q"].max(axis=1)
        d = y - out["q"][rows, a]
        loss = float(np.mean(d * d))
        g = np.zeros_like(out["q"])
        g[rows, a] = -2.0 * d / n
        return loss, net.backward(theta, cache, {"q": g})

    a1 = np.array([e.action.increment_index for e in batch])
    a2 = np.array([e.action.amplitude_index for e in batch])
    d1 = r + cfg.gamma * q_next["q1"].max(axis=1) - out["q1"][rows, a1]
    d2 = r + cfg.gamma * q_next["q2"].max(axis=1) - out["q2"][rows, a2]
    g1 = np.zeros_like(out["q1"])
    g2 = np.zeros_like(out["q2"])
    if cfg.loss_mode == "summed":
        d = d1 + d2
        loss = float(np.mean(d * d))
        g1[rows, a1] = -2.0 * d / n
        g2[rows, a2] = -2.0 * d / n
    else:
        loss = float(np.mean(0.5 * (d1 * d1 + d2 * d2)))
        g1[rows, a1] = -d1 / n
        g2[rows, a2] = -d2 / n
    return loss, net.backward(theta, cache, {"q1": g1, "q2": g2})


def act_only(agent: BranchingAgent, theta, obs: Observation, epsilon: float,
             rng: np.random.Generator) -> JointAction:
    """Decision with given parameters and no side effects on the agent."""
    return agent.select(agent.q_values(obs, theta), epsilon, rng)


def timed_act_only(agent, theta, obs, epsilon, rng):
    t0 = time.perf_counter()
    a = act_only(agent, theta, obs, epsilon, rng)
    return a, time.perf_counter() - t0
