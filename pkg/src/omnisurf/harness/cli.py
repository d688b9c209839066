"""Command line: ``run``, ``sweep``, ``report`` and ``selftest``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..env import ConfigurationError
from .config import MODES, RunConfig, desk_config
from .runner import run
from .selftest import selftest
from .sweep import SWEEP_PARAMS, report, sweep


def _base_config(args) -> RunConfig:
    if args.config:
        return RunConfig.load(args.config)
    return desk_config() if args.desk else RunConfig()


def _overrides(cfg: RunConfig, args) -> RunConfig:
    cfg = replace(cfg)
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if args.slots is not None:
        cfg.horizon = args.slots
    if args.protocol:
        cfg.protocol = args.protocol
    if args.lam is not None:
        cfg.scenario = replace(cfg.scenario, rician_factor=args.lam)
    if args.gamma_inner is not None:
        cfg.gamma_inner = args.gamma_inner
    if getattr(args, "trajectory", False):
        cfg.log_trajectory = True
    if getattr(args, "posteriors", False):
        cfg.log_posteriors = True
    return cfg.validate()


def _common(p):
    p.add_argument("--desk", action="store_true",
                   help="single-CPU preset (single-step coefficient towers, short inner loop)")
    p.add_argument("--slots", type=int, help="horizon in slots")
    p.add_argument("--protocol", choices=("ES", "MS"))
    p.add_argument("--lambda", dest="lam", type=float, help="Rician factor")
    p.add_argument("--gamma-inner", type=int, help="digital interactions per slot")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="omnisurf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scheme and write a run directory")
    p.add_argument("config", nargs="?", help="JSON config (defaults apply to missing keys)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--trajectory", action="store_true", help="also write trajectory.csv")
    p.add_argument("--posteriors", action="store_true", help="mab: also write posteriors.csv")
    _common(p)

    p = sub.add_parser("sweep", help="grid over one parameter, one run directory per cell")
    p.add_argument("--config")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--modes", default="random,mab,deepios")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("report", help="aggregate run directories")
    p.add_argument("runs", nargs="+", help="run directories or roots containing them")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=10, help="slot stride of the .dat curves")

    sub.add_parser("selftest", help="run the invariant checks")
    return ap


def _run_dirs(paths):
    out = []
    for p in map(Path, paths):
        if (p / "summary.json").exists():
            out.append(p)
        elif p.is_dir():
            out.extend(sorted(q.parent for q in p.glob("*/summary.json")))
    return out


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = _overrides(_base_config(args), args)
            res = run(cfg, args.out)
            conv = "none" if res.convergence_slot is None else res.convergence_slot
            print(f"{cfg.mode} seed={cfg.seed}: tail mean {res.tail_mean:.4f} bits/s/Hz, "
                  f"convergence slot {conv}, output in {args.out}")
        elif args.command == "sweep":
            base = _overrides(_base_config(args), args)
            modes = [m for m in args.modes.split(",") if m]
            bad = [m for m in modes if m not in MODES]
            if bad:
                ap.error(f"unknown modes {bad}")
            seeds = [int(s) for s in args.seeds.split(",") if s]
            values = [v for v in args.values.split(",") if v]
            for out, tm, conv in sweep(base, args.param, values, modes, seeds, args.out, args.jobs):
                print(f"{out}: tail mean {tm:.4f}, convergence slot {conv}")
        elif args.command == "report":
            dirs = _run_dirs(args.runs)
            rows = report(dirs, args.out, args.stride)
            for r in rows:
                print(",".join(str(v) for v in r.values()))
        elif args.command == "selftest":
            return 0 if selftest() else 1
    except ConfigurationError as exc:
        print(f"omnisurf: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"omnisurf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0
