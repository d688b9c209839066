"""Run loops for every scheme and the files they leave behind.

A run directory holds ``metrics.csv`` (deterministic per config and seed),
``timing.csv`` (wall clock, not deterministic), ``config.snapshot.json``,
``summary.json`` and, depending on the mode, ``agent.ckpt``, ``twin.ckpt``,
``trajectory.csv`` and ``posteriors.csv``.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..agent import BranchingAgent, Experience
from ..baselines import ThompsonBandit, random_policy
from ..env import EnvStateError, SurfaceEnv
from ..neural import save_params
from ..twin import DigitalTwin, TwinDataset, TwinRecord
from .config import RunConfig
from .metrics import detect_convergence, short_term_average, tail_mean

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("slot", "sum_rate", "short_term_avg", "window_full", "reward", "converged")


@dataclass
class RunResult:
    out_dir: Path | None
    mode: str
    seed: int
    rates: np.ndarray
    rewards: np.ndarray
    short_term: np.ndarray
    convergence_slot: int | None
    tail_mean: float
    decision_s: np.ndarray
    slot_s: np.ndarray
    extra: dict = field(default_factory=dict)


class _Trace:
    def __init__(self, k: int, keep_actions: bool):
        self.rates, self.rewards, self.decision, self.slot = [], [], [], []
        self.per_ue, self.actions = [], []
        self.keep = keep_actions
        self.k = k

    def add(self, action, reward, link, decision_s, slot_s):
        self.rates.append(link.sum_rate)
        self.rewards.append(reward)
        self.decision.append(decision_s)
        self.slot.append(slot_s)
        if self.keep:
            self.actions.append((action.increment_index, action.amplitude_index))
            self.per_ue.append(np.asarray(link.rate, dtype=float))


def _seeds(seed, tag):
    return np.random.default_rng([seed, tag])


def _agent(cfg: RunConfig, env: SurfaceEnv, branching: bool, tag: int = 2) -> BranchingAgent:
    n1, n2 = env.action_count()
    acfg = replace(cfg.agent, branching=branching)
    return BranchingAgent(cfg.scenario.n_bs, cfg.scenario.n_elements, n1, n2, acfg,
                          seed=[cfg.seed, tag])


# ---------------------------------------------------------------------------
# baselines and online DeepIOS

def run_baseline(cfg: RunConfig, out_dir=None) -> RunResult:
    """Drive the real env directly: random, mab, deepios or deepios_no_branch."""
    cfg.validate()
    if cfg.mode == "deepios_twin":
        raise ValueError("use run_algorithm1 for deepios_twin")
    env = SurfaceEnv(cfg.env_config(), seed=cfg.seed)
    obs = env.reset()
    n1, n2 = env.action_count()
    rng = _seeds(cfg.seed, 1)
    trace = _Trace(len(cfg.scenario.sides), cfg.log_trajectory)
    agent = bandit = None
    if cfg.mode == "mab":
        bandit = ThompsonBandit(n1, n2)
    elif cfg.mode in ("deepios", "deepios_no_branch"):
        agent = _agent(cfg, env, branching=cfg.mode == "deepios")

    for _ in range(cfg.horizon):
        t0 = time.perf_counter()
        if cfg.mode == "random":
            action = random_policy(n1, n2, rng)
        elif bandit is not None:
            action = bandit.select(rng)
        else:
            action = agent.act(obs, rng)
        t1 = time.perf_counter()
        nxt, reward, link = env.step(action)
        if bandit is not None:
            bandit.update(action, reward)
        elif agent is not None:
            agent.store(Experience(obs, action, reward, nxt))
            agent.train_step(rng)
        obs = nxt
        trace.add(action, reward, link, t1 - t0, time.perf_counter() - t0)

    extra = {}
    if agent is not None:
        extra["agent"] = agent
    if bandit is not None:
        extra["bandit"] = bandit
    return _finish(cfg, trace, out_dir, extra)


# ---------------------------------------------------------------------------
# digital-twin enhanced DeepIOS

def _record(obs, action, env: SurfaceEnv, link, start: bool) -> TwinRecord:
    return TwinRecord(obs.compact().h_hat.copy(), action.increment_index,
                      env.catalog.phase_increments[action.increment_index],
                      env.amplitude.beta_r.copy(), np.asarray(link.rate, dtype=float), start)


def bootstrap_dataset(cfg: RunConfig, catalog, agent: BranchingAgent, rng) -> TwinDataset:
    """Fill the dataset from a separate env at the bootstrap Rician factor.

    Bootstrapping happens at slot 0, so the untrained physical policy acts
    with the slot-0 exploration rate throughout.
    """
    env = SurfaceEnv(cfg.env_config(cfg.bootstrap_lambda), seed=[cfg.seed, 3], catalog=catalog)
    obs = env.reset()
    ds = TwinDataset(cfg.twin.dataset_capacity)
    eps = cfg.agent.epsilon(0)
    for i in range(cfg.twin.dataset_capacity):
        action = agent.select(agent.q_values(obs), eps, rng)
        obs, _, link = env.step(action)
        ds.collect(_record(obs, action, env, link, i == 0))
    return ds


def run_algorithm1(cfg: RunConfig, out_dir=None) -> RunResult:
    """Twin-enhanced DeepIOS: bootstrap, calibrate, Γ digital steps, deliver, act."""
    cfg.validate()
    if cfg.gamma_inner == 0:
        # Degenerate inner loop: nothing is learned in digital space.
        return run_baseline(replace(cfg, mode="deepios"), out_dir)
    env = SurfaceEnv(cfg.env_config(), seed=cfg.seed)
    n1, n2 = env.action_count()
    rng_p = _seeds(cfg.seed, 1)
    rng_d = _seeds(cfg.seed, 4)
    physical = _agent(cfg, env, branching=True)
    digital = _agent(cfg, env, branching=True)
    twin = DigitalTwin(cfg.scenario.n_bs, len(cfg.scenario.sides), env.catalog, cfg.reward,
                       cfg.twin, seed=[cfg.seed, 5],
                       full_observation=cfg.scenario.full_observation)

    ds = bootstrap_dataset(cfg, env.catalog, physical, _seeds(cfg.seed, 6))
    diag = twin.train_initial(ds)
    log.info("twin trained: %d epochs, holdout state mse %.4g", diag["epochs"],
             diag["holdout_state_mse"])

    obs = env.reset()
    trace = _Trace(len(cfg.scenario.sides), cfg.log_trajectory)
    calibrations = 0
    theta_p = digital.snapshot()
    for t in range(cfg.horizon):
        t0 = time.perf_counter()
        if t > 0 and t % cfg.twin.calib_period == 0:
            calibrations += twin.calibrate(ds, t) is not None
        if not twin.trained:
            raise EnvStateError("twin untrained at the digital phase")
        s = obs
        for _ in range(cfg.gamma_inner):
            a = digital.act(s, rng_d)
            s2, r = twin.virtual_step(s, a)
            digital.store(Experience(s, a, r, s2))
            digital.train_step(rng_d)
            s = s2
        theta_p = digital.snapshot()
        td = time.perf_counter()
        action = physical.select(physical.q_values(obs, theta_p), cfg.agent.epsilon(t), rng_p)
        t1 = time.perf_counter()
        obs, reward, link = env.step(action)
        ds.collect(_record(obs, action, env, link, t == 0))
        trace.add(action, reward, link, t1 - td, time.perf_counter() - t0)

    physical.theta = np.array(theta_p)
    return _finish(cfg, trace, out_dir, {"agent": physical, "digital": digital, "twin": twin,
                                         "dataset": ds, "twin_diag": diag,
                                         "calibrations": calibrations})


def run(cfg: RunConfig, out_dir=None) -> RunResult:
    if cfg.mode == "deepios_twin":
        return run_algorithm1(cfg, out_dir)
    return run_baseline(cfg, out_dir)


# ---------------------------------------------------------------------------
# outputs

def _finish(cfg: RunConfig, trace: _Trace, out_dir, extra) -> RunResult:
    rates = np.array(trace.rates)
    avg = short_term_average(rates, cfg.metrics.n_r)
    conv = detect_convergence(avg, cfg.metrics.conv_rel_tol, cfg.metrics.conv_hold,
                              start=min(cfg.metrics.n_r, len(rates)) - 1)
    res = RunResult(None if out_dir is None else Path(out_dir), cfg.mode, cfg.seed, rates,
                    np.array(trace.rewards), avg, conv, tail_mean(avg),
                    np.array(trace.decision), np.array(trace.slot), extra)
    if out_dir is not None:
        write_run_dir(cfg, res, trace)
    return res


def _fmt(x: float) -> str:
    return repr(float(x))


def write_run_dir(cfg: RunConfig, res: RunResult, trace: _Trace):
    out = res.out_dir
    out.mkdir(parents=True, exist_ok=True)
    n_r = cfg.metrics.n_r
    conv = res.convergence_slot
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for t in range(len(res.rates)):
            w.writerow([t, _fmt(res.rates[t]), _fmt(res.short_term[t]), int(t >= n_r - 1),
                        _fmt(res.rewards[t]), int(conv is not None and t >= conv)])
    with open(out / "timing.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("slot", "decision_us", "slot_us"))
        for t in range(len(res.rates)):
            w.writerow([t, f"{res.decision_s[t] * 1e6:.1f}", f"{res.slot_s[t] * 1e6:.1f}"])
    if trace.keep:
        with open(out / "trajectory.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["slot", "a1", "a2", "reward", "sum_rate"]
                       + [f"rate_{k}" for k in range(trace.k)])
            for t, (a, r) in enumerate(zip(trace.actions, trace.per_ue)):
                w.writerow([t, a[0], a[1], _fmt(res.rewards[t]), _fmt(res.rates[t])]
                           + [_fmt(v) for v in r])
    (out / "config.snapshot.json").write_text(cfg.dumps())
    agent = res.extra.get("agent")
    if agent is not None:
        with open(out / "agent.ckpt", "wb") as f:
            save_params(f, agent.theta, agent.net, mode=cfg.mode, seed=cfg.seed)
    twin = res.extra.get("twin")
    if twin is not None:
        twin.save(out / "twin.ckpt")
    bandit = res.extra.get("bandit")
    if bandit is not None and cfg.log_posteriors:
        rows = bandit.posteriors()
        with open(out / "posteriors.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    summary = {
        "mode": cfg.mode, "seed": cfg.seed, "protocol": cfg.protocol,
        "rician_factor": cfg.scenario.rician_factor, "penalty": cfg.reward.penalty,
        "increments": len(cfg.catalog.increment_indices), "gamma_inner": cfg.gamma_inner,
        "horizon": cfg.horizon, "tail_mean": res.tail_mean,
        "mean_rate": float(np.mean(res.rates)), "convergence_slot": conv,
        "mean_decision_us": float(np.mean(res.decision_s) * 1e6),
        "wall_s": float(np.sum(res.slot_s)),
    }
    if "calibrations" in res.extra:
        summary["calibrations"] = res.extra["calibrations"]
        summary["twin_epochs"] = res.extra["twin_diag"]["epochs"]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
