"""Reference policies: uniform random and Gaussian Thompson sampling.

Thompson sampling runs over the joint (increment, amplitude) arm set and
ignores the observation entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import JointAction


def random_policy(n1: int, n2: int, rng: np.random.Generator) -> JointAction:
    return JointAction(int(rng.integers(n1)), int(rng.integers(n2)))


@dataclass
class BanditArm:
    action: JointAction
    posterior_mean: float = 0.0
    posterior_precision: float = 1e-2
    pull_count: int = 0

    def __post_init__(self):
        if self.posterior_precision <= 0:
            raise ValueError("precision must be positive")


def make_arms(n1: int, n2: int, prior_mean: float = 0.0, prior_precision: float = 1e-2):
    return [BanditArm(JointAction(i, j), prior_mean, prior_precision)
            for i in range(n1) for j in range(n2)]


def ts_select(arms, rng: np.random.Generator) -> JointAction:
    """Draw one sample per arm posterior and return the best arm's action."""
    mu = np.array([a.posterior_mean for a in arms])
    sd = 1.0 / np.sqrt(np.array([a.posterior_precision for a in arms]))
    return arms[int(np.argmax(mu + sd * rng.standard_normal(len(arms))))].action


def ts_update(arms, action: JointAction, reward: float, obs_precision: float = 1.0):
    """Conjugate Gaussian update of the pulled arm (known noise precision)."""
    for arm in arms:
        if arm.action == action:
            prec = arm.posterior_precision + obs_precision
            arm.posterior_mean = (arm.posterior_precision * arm.posterior_mean
                                  + obs_precision * reward) / prec
            arm.posterior_precision = prec
            arm.pull_count += 1
            return arm
    raise ValueError(f"unknown arm {action}")


class ThompsonBandit:
    """Thompson sampling with a round-robin warm-up sweep.

    The first ``len(arms)`` pulls visit every arm once. The empirical
    variance of those rewards fixes the observation noise, then the sweep
    rewards are folded into the posteriors.
    """

    def __init__(self, n1: int, n2: int, prior_mean: float = 0.0, prior_precision: float = 1e-2):
        self.arms = make_arms(n1, n2, prior_mean, prior_precision)
        self.obs_precision = None
        self._sweep: list[tuple[JointAction, float]] = []

    def select(self, rng: np.random.Generator) -> JointAction:
        if self.obs_precision is None:
            return self.arms[len(self._sweep)].action
        return ts_select(self.arms, rng)

    def update(self, action: JointAction, reward: float):
        if self.obs_precision is None:
            self._sweep.append((action, float(reward)))
            if len(self._sweep) == len(self.arms):
                var = float(np.var([r for _, r in self._sweep]))
                self.obs_precision = 1.0 / var if var > 0 else 1.0
                for a, r in self._sweep:
                    ts_update(self.arms, a, r, self.obs_precision)
            return
        ts_update(self.arms, action, reward, self.obs_precision)

    def posteriors(self) -> list[dict]:
        return [{"a1": a.action.increment_index, "a2": a.action.amplitude_index,
                 "mean": a.posterior_mean, "precision": a.posterior_precision,
                 "pulls": a.pull_count} for a in self.arms]
