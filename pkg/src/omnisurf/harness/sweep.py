"""Parameter sweeps and aggregation of finished run directories."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..env import ConfigurationError
from .config import RunConfig
from .runner import run

# Increment index sets: the default sparse set and the two enlarged full sets.
INCREMENT_SETS = {
    "a1_1": (-3, -1, 0, 1, 3),
    "a1_2": tuple(range(-9, 10)),
    "a1_3": tuple(range(-15, 16)),
}

# ES reflect amplitudes; 1.000 is represented by a ratio of 1e6.
AMPLITUDE_SETS = {
    "a2_1": (0.995, 0.953, 0.707, 0.302, 0.100),
    "a2_2": (0.998, 0.995, 0.990, 0.953, 0.913, 0.707, 0.577, 0.302, 0.218, 0.100),
    "a2_3": (1.000, 0.999, 0.998, 0.995, 0.990, 0.953, 0.913, 0.806, 0.707, 0.577, 0.302,
             0.218, 0.100, 0.070, 0.032),
}

SWEEP_PARAMS = ("lambda", "omega", "action_set", "gamma_inner")


def amplitude_to_ratio(beta_r: float) -> float:
    if beta_r >= 1.0:
        return 1e6
    return beta_r ** 2 / (1.0 - beta_r ** 2)


def apply_param(cfg: RunConfig, param: str, value: str) -> RunConfig:
    cfg = replace(cfg)
    if param == "lambda":
        cfg.scenario = replace(cfg.scenario, rician_factor=float(value))
    elif param == "omega":
        cfg.reward = replace(cfg.reward, penalty=float(value))
    elif param == "gamma_inner":
        cfg.gamma_inner = int(value)
    elif param == "action_set":
        parts = value.split("+")
        inc, amp = "a1_1", "a2_1"
        for p in parts:
            if p in INCREMENT_SETS:
                inc = p
            elif p in AMPLITUDE_SETS:
                amp = p
            else:
                raise ConfigurationError(f"unknown action set {p!r}")
        n2 = len(AMPLITUDE_SETS[amp])
        cfg.catalog = replace(cfg.catalog, increment_indices=INCREMENT_SETS[inc],
                              es_ratios=tuple(amplitude_to_ratio(a) for a in AMPLITUDE_SETS[amp]),
                              ms_groups=n2)
    else:
        raise ConfigurationError(f"unknown sweep parameter {param!r}")
    return cfg


def _one(job):
    cfg_dict, out, tag = job
    cfg = RunConfig.from_dict(cfg_dict)
    res = run(cfg, out)
    summ = Path(out) / "summary.json"
    d = json.loads(summ.read_text())
    d["sweep"] = tag
    summ.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return str(out), res.tail_mean, res.convergence_slot


def sweep(base: RunConfig, param: str, values, modes, seeds, out_root, jobs: int = 1):
    """One run directory per (mode, value, seed) cell."""
    out_root = Path(out_root)
    todo = []
    for mode in modes:
        for v in values:
            for s in seeds:
                cfg = apply_param(base, param, str(v))
                cfg.mode, cfg.seed = mode, int(s)
                cfg.validate()
                out = out_root / f"{mode}__{param}={v}__seed={s}"
                todo.append((cfg.to_dict(), str(out), {"param": param, "value": str(v)}))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_one, todo))
    return [_one(j) for j in todo]


def _group_key(summary):
    sw = summary.get("sweep") or {"param": "lambda", "value": str(summary["rician_factor"])}
    return summary["mode"], sw["param"], sw["value"]


def report(run_dirs, out_dir, stride: int = 10):
    """Write ``comparison.csv`` and one ``.dat`` curve per (mode, value)."""
    groups: dict = {}
    for d in map(Path, run_dirs):
        if not (d / "summary.json").exists():
            continue
        s = json.loads((d / "summary.json").read_text())
        groups.setdefault(_group_key(s), []).append((d, s))
    if not groups:
        raise FileNotFoundError("no completed run directories found")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for (mode, param, value), items in sorted(groups.items()):
        tails = [s["tail_mean"] for _, s in items]
        convs = [s["convergence_slot"] for _, s in items if s["convergence_slot"] is not None]
        rows.append({
            "mode": mode, "param": param, "value": value, "runs": len(items),
            "tail_mean": f"{np.mean(tails):.4f}", "tail_std": f"{np.std(tails):.4f}",
            "convergence_slot": f"{np.mean(convs):.0f}" if convs else "",
            "converged_runs": len(convs),
            "mean_decision_us": f"{np.mean([s['mean_decision_us'] for _, s in items]):.1f}",
        })
        curves = [_read_avg(d) for d, _ in items]
        n = min(len(c) for c in curves)
        mean = np.mean([c[:n] for c in curves], axis=0)
        with open(out_dir / f"{mode}__{param}={value}.dat", "w") as f:
            f.write(f"# slot short_term_avg ({mode}, {param}={value}, {len(items)} runs)\n")
            for t in range(0, n, stride):
                f.write(f"{t} {mean[t]:.6f}\n")
    with open(out_dir / "comparison.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def _read_avg(d: Path) -> np.ndarray:
    with open(d / "metrics.csv") as f:
        r = csv.DictReader(f)
        return np.array([float(row["short_term_avg"]) for row in r])
