"""Fast invariant checks runnable from an installed package."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from .. import channel as chn
from ..env import EnvConfig, JointAction, SurfaceEnv
from ..ios import DEFAULT_ES_RATIOS, es_amplitude_from_ratio
from ..neural import GRU, Dense, Network, ResidualBlock, mse_loss, numerical_gradient
from ..transceiver import PilotConfig, evaluate_link, mmse_estimate, uplink_pilot, zf_precoder
from .config import RunConfig
from .runner import run


def _mmse_noiseless():
    rng = np.random.default_rng(0)
    H = chn.sample_rician(np.zeros((5, 5)), 0.0, rng)
    cfg = PilotConfig.orthogonal(5, 0.0)
    err = np.abs(mmse_estimate(uplink_pilot(H, cfg, rng), cfg) - H).max()
    return err < 1e-10, f"max error {err:.2e}"


def _zf_leakage():
    rng = np.random.default_rng(1)
    H = chn.sample_rician(np.zeros((5, 5)), 0.0, rng)
    g = np.abs(zf_precoder(H) @ H) ** 2
    leak = (g - np.diag(np.diag(g))).max()
    return leak < 1e-9, f"max leakage {leak:.2e}"


def _es_amplitudes():
    got = np.array([es_amplitude_from_ratio(r)[0] for r in DEFAULT_ES_RATIOS])
    err = np.abs(got - [0.995, 0.953, 0.707, 0.302, 0.100]).max()
    return err < 5e-4, f"max error {err:.1e}"


def _cosines():
    po, pb = chn.directional_cosines(chn.Geometry())
    err = max(abs(po + 0.68041), abs(pb - 0.27217))
    return err < 1e-4, f"({po:.5f}, {pb:.5f})"


def _gradients():
    rng = np.random.default_rng(2)
    net = Network({"a": [GRU(3, 4), Dense(4, 4)], "b": [Dense(2, 4)]},
                  {"y": [ResidualBlock([Dense(8, 8), Dense(8, 8, "linear")]),
                         Dense(8, 2, "linear")]})
    theta = net.init_params(rng)
    x = {"a": rng.normal(size=(3, 4, 3)), "b": rng.normal(size=(3, 2))}
    tgt = rng.normal(size=(3, 2))
    loss = lambda th: mse_loss(net(th, x)["y"], tgt, 3)[0]
    out, cache = net.forward(theta, x)
    g = net.backward(theta, cache, {"y": mse_loss(out["y"], tgt, 3)[1]})
    idx = rng.choice(theta.size, 40, replace=False)
    num = numerical_gradient(loss, theta, 1e-6, idx)
    rel = max(abs(num[i] - g[i]) / max(1e-8, abs(num[i]) + abs(g[i])) for i in idx)
    return rel < 1e-4, f"max relative error {rel:.1e}"


def _link_rate():
    rng = np.random.default_rng(3)
    H = chn.sample_rician(np.zeros((5, 5)), 0.0, rng)
    link = evaluate_link(zf_precoder(H), H, 0.5)
    ok = np.all(np.isfinite(link.rate)) and np.all(link.rate >= 0)
    return bool(ok), f"sum rate {link.sum_rate:.3f}"


def _env_determinism():
    def trace():
        env = SurfaceEnv(EnvConfig(), seed=11)
        env.reset()
        return [env.step(JointAction(i % 5, i % 3))[1] for i in range(20)]
    a, b = trace(), trace()
    return a == b, "20-step reward traces identical" if a == b else "traces differ"


def _run_determinism():
    cfg = RunConfig(mode="mab", horizon=50, seed=5)
    with tempfile.TemporaryDirectory() as d:
        run(cfg, Path(d) / "a")
        run(cfg, Path(d) / "b")
        same = (Path(d) / "a/metrics.csv").read_bytes() == (Path(d) / "b/metrics.csv").read_bytes()
    return same, "metrics.csv byte-identical" if same else "metrics.csv differs"


CHECKS = [
    ("noiseless MMSE recovery", _mmse_noiseless),
    ("ZF leakage", _zf_leakage),
    ("ES amplitudes", _es_amplitudes),
    ("directional cosines", _cosines),
    ("network gradients", _gradients),
    ("link rates finite", _link_rate),
    ("env determinism", _env_determinism),
    ("run determinism", _run_determinism),
]


def selftest(stream=None) -> bool:
    ok_all = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}", file=stream)
    return ok_all
