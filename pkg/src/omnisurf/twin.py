"""Learned environment model used for virtual interaction.

The data-requisition dataset keeps, per physical slot, the estimated
channel, the applied phase increment, the reflect amplitudes and the per-UE
rates. Consecutive records form supervised pairs

    (state_i, action_{i+1}) -> (channel estimate_{i+1}, reward_{i+1})

where the coefficient part of each state is rebuilt from the logged
increments. Only the channel estimate is learned; the next coefficients are
an exact function of the state and the action.
"""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .env import (JointAction, Observation, RewardConfig, coeff_tensor, make_observation,
                  reward_from_sum_rate)
from .ios import ActionCatalog, PhaseState, apply_increment
from .neural import CHECKPOINT_VERSION, GRU, SGD, Dense, Network, ResidualBlock, mse_loss

log = logging.getLogger(__name__)

CSV_VERSION = 1


class TwinStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class TwinRecord:
    h_hat: np.ndarray          # 2 x N x K
    increment_index: int
    increment: np.ndarray      # complex, length M
    beta_r: np.ndarray         # length M
    rates: np.ndarray          # length K
    segment_start: bool = False

    @property
    def sum_rate(self) -> float:
        return float(np.sum(self.rates))


@dataclass
class TwinConfig:
    dataset_capacity: int = 1000
    calib_batch: int = 24
    calib_period: int = 10
    lr_state: float = 0.001
    lr_reward: float = 0.001
    hidden: int = 64
    train_batch: int = 24
    holdout: float = 0.2
    patience: int = 10
    max_epochs: int = 500
    channel_scale: float = 0.2
    momentum: float = 0.0
    full_state: bool = False

    def __post_init__(self):
        if self.calib_batch > self.dataset_capacity:
            raise ValueError("calib_batch cannot exceed dataset_capacity")


def beta_t_from_beta_r(beta_r):
    # Holds for ES (beta_r^2 + beta_t^2 = 1) and for binary MS.
    return np.sqrt(np.clip(1.0 - np.asarray(beta_r) ** 2, 0.0, 1.0))


class TwinDataset:
    """FIFO dataset that can rebuild the applied phases of every record."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.records: deque = deque()
        self._anchor = None  # phases in force before the oldest record

    def __len__(self):
        return len(self.records)

    def collect(self, record: TwinRecord):
        if len(self.records) == self.capacity:
            old = self.records.popleft()
            base = self._base(old, self._anchor)
            self._anchor = apply_increment(PhaseState(base), old.increment).phases
        if not self.records and self._anchor is None:
            self._anchor = np.ones(len(record.increment), dtype=complex)
        self.records.append(record)

    @staticmethod
    def _base(rec, prev):
        if rec.segment_start or prev is None:
            return np.ones(len(rec.increment), dtype=complex)
        return prev

    def phases(self) -> list[np.ndarray]:
        """Phase vector applied in each record's slot."""
        out, prev = [], self._anchor
        for rec in self.records:
            cur = apply_increment(PhaseState(self._base(rec, prev)), rec.increment).phases
            out.append(cur)
            prev = cur
        return out

    def latest(self, n: int) -> list[int]:
        """Indices of the ``n`` newest records."""
        return list(range(max(0, len(self.records) - n), len(self.records)))

    # -- csv -----------------------------------------------------------------
    def to_csv(self, path):
        recs = list(self.records)
        if not recs:
            raise ValueError("empty dataset")
        _, n, k = recs[0].h_hat.shape
        m = len(recs[0].increment)
        with open(path, "w", newline="") as f:
            f.write(f"# twin-dataset v{CSV_VERSION} N={n} K={k} M={m} "
                    f"anchor={' '.join(f'{float(z.real)!r},{float(z.imag)!r}' for z in self._anchor)}\n")
            w = csv.writer(f)
            w.writerow(_csv_header(n, k, m))
            for r in recs:
                w.writerow([int(r.segment_start), r.increment_index]
                           + [repr(float(v)) for v in r.h_hat.ravel()]
                           + [repr(float(v)) for v in r.increment.real]
                           + [repr(float(v)) for v in r.increment.imag]
                           + [repr(float(v)) for v in r.beta_r]
                           + [repr(float(v)) for v in r.rates])

    @classmethod
    def from_csv(cls, path, capacity: int | None = None) -> "TwinDataset":
        with open(path, newline="") as f:
            meta = f.readline().split()
            if meta[:3] != ["#", "twin-dataset", f"v{CSV_VERSION}"]:
                raise ValueError("not a twin dataset file")
            dims = dict(t.split("=", 1) for t in meta[3:6])
            n, k, m = int(dims["N"]), int(dims["K"]), int(dims["M"])
            pairs = [meta[6].split("=", 1)[1]] + meta[7:]
            anchor = np.array([complex(float(a), float(b))
                               for a, b in (t.split(",") for t in pairs)])
            rows = list(csv.reader(f))
        header, rows = rows[0], rows[1:]
        if header != _csv_header(n, k, m):
            raise ValueError("unexpected column layout")
        ds = cls(capacity or len(rows))
        for row in rows:
            v = np.array(row[2:], dtype=float)
            o = 0
            h = v[o:o + 2 * n * k].reshape(2, n, k); o += 2 * n * k
            inc = v[o:o + m] + 1j * v[o + m:o + 2 * m]; o += 2 * m
            br = v[o:o + m]; o += m
            rates = v[o:o + k]
            ds.records.append(TwinRecord(h, int(row[1]), inc, br, rates, bool(int(row[0]))))
        ds._anchor = anchor
        return ds


def _csv_header(n, k, m):
    cols = ["segment_start", "increment_index"]
    cols += [f"h_{p}_{i}_{j}" for p in ("re", "im") for i in range(n) for j in range(k)]
    cols += [f"inc_re_{i}" for i in range(m)] + [f"inc_im_{i}" for i in range(m)]
    cols += [f"beta_r_{i}" for i in range(m)] + [f"rate_{j}" for j in range(k)]
    return cols


# ---------------------------------------------------------------------------
# model

def recover_phases(obs: Observation) -> np.ndarray:
    """Unit-modulus phase vector behind an observation's coefficient tensors."""
    o = obs.compact()
    z = (o.phi_r_prev[0] + o.phi_t_prev[0]) + 1j * (o.phi_r_prev[1] + o.phi_t_prev[1])
    return z / np.abs(z)


def _jit(fn):
    try:
        from numba import njit
    except ImportError:  # plain numpy gives the same numbers, only slower
        return fn
    return njit(cache=True)(fn)


@_jit
def _virtual_kernel(h_seq, h_flat, coeff, const, Wc, hw, U_zr, U_n, W2, b2, Wy, by,
                    W1h, R1, r1, R2, r2, wo, bo):
    """Dense part of one virtual step on cached, pre-scaled weights.

    Gate columns carry a folded 0.5, so sigmoid(a) = 0.5 + 0.5 tanh(column),
    and ``U_n`` carries a 0.5 so that ``(r * h) U_n = (h + tanh_r * h) U_n_half``.
    Returns the scaled next-channel vector and the normalized reward.
    """
    w = U_n.shape[0]
    base = coeff @ Wc + const
    xw = h_seq @ hw + base[:3 * w]
    g = np.tanh(xw[0, :2 * w])
    h = (0.5 + 0.5 * g[:w]) * np.tanh(xw[0, 2 * w:])    # zero initial state
    for s in range(1, h_seq.shape[0]):
        g = np.tanh(xw[s, :2 * w] + h @ U_zr)
        d = np.tanh(xw[s, 2 * w:] + (h + g[w:] * h) @ U_n) - h
        h = h + 0.5 * (d + g[:w] * d)
    y = np.maximum(h @ W2 + b2, 0.0) @ Wy + by
    x = np.maximum(h_flat @ W1h + base[3 * w:], 0.0)
    x = x + np.maximum(x @ R1 + r1, 0.0) @ R2 + r2
    return y, x @ wo + bo


class DigitalTwin:
    """Next-state predictor (GRU + FC) and reward predictor (residual FC block)."""

    def __init__(self, n_bs: int, n_ues: int, catalog: ActionCatalog, reward: RewardConfig,
                 config: TwinConfig | None = None, seed: int | None = 0,
                 full_observation: bool = False):
        self.config = cfg = config or TwinConfig()
        self.catalog = catalog
        self.reward_cfg = reward
        self.n, self.k, self.m = n_bs, n_ues, catalog.m
        self.n1 = catalog.n_increments
        self.full_observation = full_observation
        self.rng = np.random.default_rng(seed)
        w = cfg.hidden
        step_in = 2 * self.n + 4 * self.m + self.n1 + self.m
        out = 2 * self.n * self.k + (4 * self.m if cfg.full_state else 0)
        self.state_net = Network({"x": [GRU(step_in, w), Dense(w, w)]},
                                 {"y": [Dense(w, out, "linear")]})
        flat_in = 2 * self.n * self.k + 4 * self.m + self.n1 + self.m
        self.reward_net = Network(
            {"x": [Dense(flat_in, w), ResidualBlock([Dense(w, w), Dense(w, w, "linear")])]},
            {"y": [Dense(w, 1, "linear")]})
        self.theta_p = self.state_net.init_params(self.rng)
        self.theta_r = self.reward_net.init_params(self.rng)
        self.opt_p = SGD(cfg.lr_state, cfg.momentum)
        self.opt_r = SGD(cfg.lr_reward, cfg.momentum)
        self.reward_mean, self.reward_std = 0.0, 1.0
        self.trained = False
        self._fast = self._fast_key = None
        self._updates = 0

    # -- encoding ------------------------------------------------------------
    def _beta_r(self, a2):
        return self.catalog.amplitude_options[a2].beta_r

    def _encode(self, h_hat, coeff_r, coeff_t, a1, beta_r):
        """Batched inputs. ``h_hat``: (B, 2, N, K); coefficients (B, 2, M)."""
        b = h_hat.shape[0]
        s = self.config.channel_scale
        onehot = np.zeros((b, self.n1))
        onehot[np.arange(b), a1] = 1.0
        ctx = np.concatenate([coeff_r.reshape(b, -1), coeff_t.reshape(b, -1), onehot, beta_r], axis=1)
        seq = h_hat.transpose(0, 3, 1, 2).reshape(b, self.k, 2 * self.n) * s
        seq = np.concatenate([seq, np.repeat(ctx[:, None, :], self.k, axis=1)], axis=2)
        flat = np.concatenate([h_hat.reshape(b, -1) * s, ctx], axis=1)
        return {"x": seq}, {"x": flat}

    def _encode_obs(self, states, actions):
        obs = [o.compact() for o in states]
        h = np.stack([o.h_hat for o in obs])
        cr = np.stack([o.phi_r_prev for o in obs])
        ct = np.stack([o.phi_t_prev for o in obs])
        a1 = np.array([a.increment_index for a in actions])
        br = np.stack([self._beta_r(a.amplitude_index) for a in actions])
        return self._encode(h, cr, ct, a1, br)

    # -- supervised pairs ----------------------------------------------------
    def reward_target(self, rec: TwinRecord) -> float:
        return reward_from_sum_rate(rec.sum_rate, self.reward_cfg)

    def build_pairs(self, dataset: TwinDataset, indices=None):
        """Arrays for pairs ending at the given record indices (default: all)."""
        recs = list(dataset.records)
        phases = dataset.phases()
        idx = range(1, len(recs)) if indices is None else indices
        idx = [j for j in idx if j >= 1 and not recs[j].segment_start]
        if not idx:
            return None
        prev = [j - 1 for j in idx]
        h = np.stack([recs[i].h_hat for i in prev])
        br_prev = np.stack([recs[i].beta_r for i in prev])
        ph = np.stack([phases[i] for i in prev])
        dr = br_prev * ph
        dt = beta_t_from_beta_r(br_prev) * ph
        cr = np.stack([dr.real, dr.imag], axis=1)
        ct = np.stack([dt.real, dt.imag], axis=1)
        a1 = np.array([recs[j].increment_index for j in idx])
        br = np.stack([recs[j].beta_r for j in idx])
        x_p, x_r = self._encode(h, cr, ct, a1, br)
        y_state = np.stack([recs[j].h_hat.ravel() for j in idx]) * self.config.channel_scale
        if self.config.full_state:
            nxt = np.stack([phases[j] for j in idx])
            nr, nt = br * nxt, beta_t_from_beta_r(br) * nxt
            y_state = np.concatenate([y_state, nr.real, nr.imag, nt.real, nt.imag], axis=1)
        y_reward = np.array([self.reward_target(recs[j]) for j in idx])
        return x_p, x_r, y_state, y_reward

    # -- training ------------------------------------------------------------
    def _sgd(self, x_p, x_r, y_s, y_r, rows):
        sub = lambda d: {k: v[rows] for k, v in d.items()}
        b = len(rows)
        self._updates += 1
        out, cache = self.state_net.forward(self.theta_p, sub(x_p))
        lp, gp = mse_loss(out["y"], y_s[rows], b)
        self.opt_p.step(self.theta_p, self.state_net.backward(self.theta_p, cache, {"y": gp}))
        yr = ((y_r[rows] - self.reward_mean) / self.reward_std)[:, None]
        out, cache = self.reward_net.forward(self.theta_r, sub(x_r))
        lr_, gr = mse_loss(out["y"], yr, b)
        self.opt_r.step(self.theta_r, self.reward_net.backward(self.theta_r, cache, {"y": gr}))
        return lp, lr_

    def _holdout_mse(self, x_p, x_r, y_s, y_r, rows):
        sub = lambda d: {k: v[rows] for k, v in d.items()}
        ps = self.state_net(self.theta_p, sub(x_p))["y"]
        pr = self.reward_net(self.theta_r, sub(x_r))["y"][:, 0] * self.reward_std + self.reward_mean
        return float(np.mean((ps - y_s[rows]) ** 2)), float(np.mean((pr - y_r[rows]) ** 2))

    def train_initial(self, dataset: TwinDataset, min_records: int | None = None) -> dict:
        """Mini-batch SGD on all pairs with early stopping on a holdout split."""
        cfg = self.config
        need = cfg.dataset_capacity if min_records is None else min_records
        if len(dataset) < max(need, 5):
            raise TwinStateError(f"dataset has {len(dataset)} records, need {need}")
        x_p, x_r, y_s, y_r = self.build_pairs(dataset)
        n = len(y_r)
        perm = self.rng.permutation(n)
        n_hold = max(1, int(round(cfg.holdout * n)))
        hold, train = perm[:n_hold], perm[n_hold:]
        self.reward_mean = float(np.mean(y_r[train]))
        self.reward_std = float(np.std(y_r[train])) or 1.0
        best, best_ep, wait = np.inf, 0, 0
        best_params = (self.theta_p.copy(), self.theta_r.copy())
        history = []
        for ep in range(cfg.max_epochs):
            order = self.rng.permutation(train)
            losses = [self._sgd(x_p, x_r, y_s, y_r, order[i:i + cfg.train_batch])
                      for i in range(0, len(order), cfg.train_batch)]
            ms, mr = self._holdout_mse(x_p, x_r, y_s, y_r, hold)
            score = ms / (np.var(y_s[hold]) + 1e-12) + mr / (np.var(y_r[hold]) + 1e-12)
            history.append({"epoch": ep, "train_state": float(np.mean([l[0] for l in losses])),
                            "train_reward": float(np.mean([l[1] for l in losses])),
                            "holdout_state": ms, "holdout_reward": mr})
            if score < best - 1e-9:
                best, best_ep, wait = score, ep, 0
                best_params = (self.theta_p.copy(), self.theta_r.copy())
            else:
                wait += 1
                if wait >= cfg.patience:
                    break
        self.theta_p, self.theta_r = best_params
        self.trained = True
        ms, mr = self._holdout_mse(x_p, x_r, y_s, y_r, hold)
        return {"epochs": len(history), "best_epoch": best_ep, "history": history,
                "holdout_state_mse": ms, "holdout_reward_mse": mr,
                "state_target_var": float(np.var(y_s[hold])),
                "reward_target_var": float(np.var(y_r[hold]))}

    def calibrate(self, dataset: TwinDataset, t: int) -> dict | None:
        """One SGD step on the newest ``calib_batch`` records, every ``calib_period`` slots."""
        cfg = self.config
        if t <= 0 or t % cfg.calib_period != 0:
            log.warning("calibration requested off schedule at slot %d", t)
            return None
        pairs = self.build_pairs(dataset, dataset.latest(cfg.calib_batch))
        if pairs is None:
            return None
        x_p, x_r, y_s, y_r = pairs
        lp, lr_ = self._sgd(x_p, x_r, y_s, y_r, np.arange(len(y_r)))
        return {"slot": t, "state_loss": lp, "reward_loss": lr_, "batch": len(y_r)}

    # -- prediction ----------------------------------------------------------
    def next_coefficients(self, state: Observation, action: JointAction):
        phase = apply_increment(PhaseState(recover_phases(state)),
                                self.catalog.phase_increments[action.increment_index])
        amp = self.catalog.amplitude_options[action.amplitude_index]
        return amp.beta_r * phase.phases, amp.beta_t * phase.phases

    def predict_next_state(self, state: Observation, action: JointAction) -> Observation:
        x_p, _ = self._encode_obs([state], [action])
        y = self.state_net(self.theta_p, x_p)["y"][0]
        nk = 2 * self.n * self.k
        h = y[:nk].reshape(2, self.n, self.k) / self.config.channel_scale
        d_r, d_t = self.next_coefficients(state, action)
        obs = make_observation(np.zeros((self.n, self.k)), d_r, d_t, self.full_observation)
        return Observation(h, obs.phi_r_prev, obs.phi_t_prev)

    def predict_reward(self, state: Observation, action: JointAction) -> float:
        _, x_r = self._encode_obs([state], [action])
        y = self.reward_net(self.theta_r, x_r)["y"][0, 0]
        return float(y * self.reward_std + self.reward_mean)

    def virtual_step(self, state: Observation, action: JointAction) -> tuple[Observation, float]:
        """Single-sample step on the same weights as the batched predictors.

        Everything that depends only on the action is folded into cached
        constants, the context projection is shared by all GRU steps, and
        the dense math runs in one compiled kernel when numba is available.
        """
        if not self.trained:
            raise TwinStateError("twin must be trained before virtual interaction")
        o = state.compact()
        n, k = self.n, self.k
        f = self._fast if self._fast_fresh() else self._fast_weights()
        a1, a2 = action.increment_index, action.amplitude_index
        pr, pt = o.phi_r_prev, o.phi_t_prev

        h_in = o.h_hat * self.config.channel_scale
        y, r = _virtual_kernel(
            np.ascontiguousarray(h_in.transpose(2, 0, 1)).reshape(k, 2 * n), h_in.ravel(),
            np.concatenate([pr.ravel(), pt.ravel()]), f["const"][a1, a2], f["Wc"], f["hw"],
            f["U_zr"], f["U_n"], f["W2"], f["b2"], f["Wy"], f["by"], f["W1h"], f["R1"],
            f["r1"], f["R2"], f["r2"], f["wo"], f["bo"][0])
        r = r * self.reward_std + self.reward_mean

        # (re, im) pairs of the summed coefficients, viewed as complex
        z = np.ascontiguousarray((pr + pt).T).view(np.complex128)[:, 0]
        phase = z / np.abs(z) * self.catalog.phase_increments[a1]
        # rows: reflect, refract; then (re, im) of beta * phase
        coeff = f["amps"][a2] * phase.view(np.float64).reshape(-1, 2).T
        h_next = y[:2 * n * k].reshape(2, n, k) / self.config.channel_scale
        if self.full_observation:
            d_r, d_t = (c[0] + 1j * c[1] for c in coeff)
            return Observation(h_next, coeff_tensor(d_r, True), coeff_tensor(d_t, True)), float(r)
        return Observation(h_next, coeff[0], coeff[1]), float(r)

    def _fast_fresh(self) -> bool:
        key = self._fast_key
        return (key is not None and key[2] == self._updates and key[0] is self.theta_p
                and key[1] is self.theta_r)

    def _fast_weights(self) -> dict:
        """Weights for :meth:`virtual_step`, rebuilt after any parameter update.

        Call :meth:`invalidate` after editing ``theta_p`` or ``theta_r`` in place.
        """
        if self._fast_fresh():
            return self._fast
        vp = lambda name: self.state_net.layout.view(self.theta_p, name)
        vr = lambda name: self.reward_net.layout.view(self.theta_r, name)
        n, k, m, w = self.n, self.k, self.m, self.config.hidden
        nk, n1 = 2 * n * k, self.n1
        W, U, W1 = vp("tower.x.0.W"), vp("tower.x.0.U"), vr("tower.x.0.W")
        cw = W[2 * n:]              # context rows of the GRU input weights
        rw = W1[nk:]                # context rows of the reward input weights
        betas = np.stack([opt.beta_r for opt in self.catalog.amplitude_options])
        const = np.empty((n1, len(betas), 3 * w + w))
        for a1 in range(n1):
            const[a1, :, :3 * w] = cw[4 * m + a1] + betas @ cw[4 * m + n1:] + vp("tower.x.0.b")
            const[a1, :, 3 * w:] = rw[4 * m + a1] + betas @ rw[4 * m + n1:] + vr("tower.x.0.b")
        c = np.ascontiguousarray
        fast = {
            "Wc": c(np.hstack([cw[:4 * m], rw[:4 * m]])), "const": const,
            "hw": c(W[:2 * n]), "U_zr": c(U[:, :2 * w]), "U_n": c(U[:, 2 * w:]),
            "W2": vp("tower.x.1.W"), "b2": vp("tower.x.1.b"),
            "Wy": vp("head.y.0.W"), "by": vp("head.y.0.b"),
            "W1h": c(W1[:nk]), "R1": vr("tower.x.2.W"), "r1": vr("tower.x.2.b"),
            "R2": vr("tower.x.3.W"), "r2": vr("tower.x.3.b"),
            "Wo": vr("head.y.0.W"), "bo": vr("head.y.0.b"),
        }
        fast = {name: np.array(v) for name, v in fast.items()}
        fast["wo"] = np.ascontiguousarray(fast["Wo"][:, 0])
        for name in ("Wc", "const", "hw"):
            fast[name][..., :2 * w] *= 0.5
        fast["U_zr"] *= 0.5
        fast["U_n"] *= 0.5
        opts = self.catalog.amplitude_options
        fast["amps"] = np.array([[o.beta_r, o.beta_t] for o in opts])[:, :, None, :]
        self._fast_key = (self.theta_p, self.theta_r, self._updates)
        self._fast = fast
        return fast

    def invalidate(self):
        self._updates += 1

    # -- checkpoints -----------------------------------------------------------
    def save(self, path):
        """Both predictors and the reward normalization in one npz archive."""
        with open(path, "wb") as f:
            np.savez(f, version=CHECKPOINT_VERSION, theta_p=self.theta_p, theta_r=self.theta_r,
                     reward_norm=np.array([self.reward_mean, self.reward_std]),
                     trained=self.trained)

    def load(self, path):
        with np.load(path, allow_pickle=False) as f:
            if int(f["version"]) != CHECKPOINT_VERSION:
                raise ValueError("unsupported checkpoint version")
            if f["theta_p"].shape != self.theta_p.shape or f["theta_r"].shape != self.theta_r.shape:
                raise ValueError("checkpoint does not match twin sizes")
            self.theta_p = f["theta_p"].copy()
            self.theta_r = f["theta_r"].copy()
            self.reward_mean, self.reward_std = (float(v) for v in f["reward_norm"])
            self.trained = bool(f["trained"])
        return self
