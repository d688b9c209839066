"""Small numpy neural-network substrate with exact backpropagation.

Layers: fully connected, GRU (final hidden state), residual block. A
:class:`Network` wires one tower per named input, concatenates the tower
outputs, runs an optional shared trunk and then one head per named output.

All parameters of a network live in one flat float64 vector; layers read
named views into it. That makes copying, SGD, checkpointing and finite
differences trivial.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CHECKPOINT_VERSION = 1


class CacheStateError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# activations

def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, dy):
    if name == "relu":
        return dy * (z > 0)
    return dy


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------------------
# layers

class Layer:
    """Base layer. ``params`` lists ``(name, shape, fan_in)``."""

    in_dim: int
    out_dim: int

    def param_specs(self):
        return []

    def forward(self, p, x):
        raise NotImplementedError

    def backward(self, p, cache, dy, g):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, in_dim, out_dim, activation="relu"):
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation

    def param_specs(self):
        return [("W", (self.in_dim, self.out_dim), self.in_dim), ("b", (self.out_dim,), self.in_dim)]

    def forward(self, p, x):
        z = x @ p["W"] + p["b"]
        return _act(self.activation, z), (x, z)

    def backward(self, p, cache, dy, g):
        x, z = cache
        dz = _act_grad(self.activation, z, dy)
        g["W"] += x.T @ dz
        g["b"] += dz.sum(axis=0)
        return dz @ p["W"].T


class GRU(Layer):
    """Gated recurrent unit over ``(batch, steps, features)``; returns the last state.

    ``z = s(x Wz + h Uz + bz)``, ``r = s(x Wr + h Ur + br)``,
    ``n = tanh(x Wn + (r * h) Un + bn)``, ``h' = (1 - z) h + z n``.
    The initial state is zero.
    """

    def __init__(self, in_dim, hidden):
        self.in_dim, self.out_dim = in_dim, hidden

    def param_specs(self):
        h = self.out_dim
        return [("W", (self.in_dim, 3 * h), self.in_dim), ("U", (h, 3 * h), h), ("b", (3 * h,), h)]

    def forward(self, p, x):
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise ValueError(f"GRU expects (batch, steps, {self.in_dim}), got {x.shape}")
        b, t, _ = x.shape
        H = self.out_dim
        W, U, bias = p["W"], p["U"], p["b"]
        U_zr, U_n = U[:, :2 * H], U[:, 2 * H:]
        xw = (x.reshape(b * t, -1) @ W + bias).reshape(b, t, 3 * H)
        h = np.zeros((b, H))
        steps = []
        for s in range(t):
            a = xw[:, s]
            zr = _sigmoid(a[:, :2 * H] + h @ U_zr)
            z, r = zr[:, :H], zr[:, H:]
            rh = r * h
            n = np.tanh(a[:, 2 * H:] + rh @ U_n)
            steps.append((h, z, r, rh, n))
            h = (1.0 - z) * h + z * n
        return h, (x, steps)

    def backward(self, p, cache, dy, g):
        x, steps = cache
        b, t, _ = x.shape
        H = self.out_dim
        U = p["U"]
        U_zr, U_n = U[:, :2 * H], U[:, 2 * H:]
        da_all = np.empty((b, t, 3 * H))
        dh = dy
        gU = g["U"]
        for s in range(t - 1, -1, -1):
            h, z, r, rh, n = steps[s]
            dn = dh * z
            dz = dh * (n - h)
            dh_prev = dh * (1.0 - z)
            dan = dn * (1.0 - n * n)
            gU[:, 2 * H:] += rh.T @ dan
            drh = dan @ U_n.T
            dr = drh * h
            dh_prev += drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dazr = np.concatenate([daz, dar], axis=1)
            gU[:, :2 * H] += h.T @ dazr
            dh_prev += dazr @ U_zr.T
            da_all[:, s, :2 * H] = dazr
            da_all[:, s, 2 * H:] = dan
            dh = dh_prev
        da = da_all.reshape(b * t, -1)
        g["W"] += x.reshape(b * t, -1).T @ da
        g["b"] += da.sum(axis=0)
        return (da @ p["W"].T).reshape(x.shape)


class ResidualBlock(Layer):
    """``y = x + inner(x)`` for an inner stack that preserves width."""

    def __init__(self, layers):
        self.layers = list(layers)
        self.in_dim = self.layers[0].in_dim
        self.out_dim = self.layers[-1].out_dim
        if self.in_dim != self.out_dim:
            raise ValueError("residual block must preserve width")


# ---------------------------------------------------------------------------
# parameter layout

@dataclass(frozen=True)
class Slot:
    start: int
    shape: tuple
    stop: int = -1

    def __post_init__(self):
        object.__setattr__(self, "stop", self.start + int(np.prod(self.shape)))


class Layout:
    """Named slices of a flat parameter vector."""

    def __init__(self):
        self.slots: dict[str, Slot] = {}
        self.fan_in: dict[str, int] = {}
        self.size = 0

    def add(self, name, shape, fan_in):
        if name in self.slots:
            raise ValueError(f"duplicate parameter {name}")
        self.slots[name] = Slot(self.size, tuple(shape))
        self.fan_in[name] = fan_in
        self.size = self.slots[name].stop

    def view(self, theta, name):
        s = self.slots[name]
        return theta[s.start:s.stop].reshape(s.shape)

    def to_json(self):
        return {k: [s.start, list(s.shape)] for k, s in self.slots.items()}


# ---------------------------------------------------------------------------
# network

def _flatten(layers):
    for layer in layers:
        if isinstance(layer, ResidualBlock):
            yield layer
            yield from _flatten(layer.layers)
        else:
            yield layer


class Network:
    """Multi-input, multi-output feed-forward network.

    Parameters
    ----------
    towers : dict[str, list[Layer]]
        One layer stack per named input. Tower outputs are concatenated
        in insertion order.
    heads : dict[str, list[Layer]]
        One layer stack per named output, each fed the shared feature.
    trunk : list[Layer], optional
        Layers applied to the concatenated feature before the heads.
    """

    def __init__(self, towers, heads, trunk=()):
        self.towers = {k: list(v) for k, v in towers.items()}
        self.trunk = list(trunk)
        self.heads = {k: list(v) for k, v in heads.items()}
        self.layout = Layout()
        self._names = {}
        self._slices = {}
        for group, stacks in (("tower", self.towers), ("trunk", {"": self.trunk}),
                              ("head", self.heads)):
            for key, layers in stacks.items():
                for i, layer in enumerate(_flatten(layers)):
                    prefix = f"{group}.{key}.{i}" if key else f"{group}.{i}"
                    self._names[id(layer)] = prefix
                    for pname, shape, fan in layer.param_specs():
                        self.layout.add(f"{prefix}.{pname}", shape, fan)
                    self._slices[id(layer)] = [
                        (pname, self.layout.slots[f"{prefix}.{pname}"])
                        for pname, _, _ in layer.param_specs()]
        width = sum(t[-1].out_dim for t in self.towers.values())
        first = self.trunk[0] if self.trunk else None
        if first is not None and first.in_dim != width:
            raise ValueError(f"trunk expects {first.in_dim}, towers give {width}")
        feat = self.trunk[-1].out_dim if self.trunk else width
        for k, h in self.heads.items():
            if h[0].in_dim != feat:
                raise ValueError(f"head {k} expects {h[0].in_dim}, feature is {feat}")

    @property
    def size(self) -> int:
        return self.layout.size

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per parameter."""
        theta = np.empty(self.size)
        for name, slot in self.layout.slots.items():
            bound = 1.0 / np.sqrt(self.layout.fan_in[name])
            theta[slot.start:slot.stop] = rng.uniform(-bound, bound, slot.stop - slot.start)
        return theta

    def _params(self, theta, layer):
        return {pname: theta[s.start:s.stop].reshape(s.shape)
                for pname, s in self._slices[id(layer)]}

    def _run(self, theta, layers, x, caches):
        for layer in layers:
            if isinstance(layer, ResidualBlock):
                inner = []
                y = self._run(theta, layer.layers, x, inner)
                caches.append((layer, inner))
                x = x + y
            else:
                x, c = layer.forward(self._params(theta, layer), x)
                caches.append((layer, c))
        return x

    def _back(self, theta, caches, dy, grad):
        for layer, c in reversed(caches):
            if isinstance(layer, ResidualBlock):
                dy = dy + self._back(theta, c, dy, grad)
            else:
                g = self._params(grad, layer)
                dy = layer.backward(self._params(theta, layer), c, dy, g)
        return dy

    def forward(self, theta, inputs: dict):
        """Evaluate all heads. Returns ``(outputs, cache)``."""
        if theta.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {theta.shape}")
        tower_caches, feats = {}, []
        for k, layers in self.towers.items():
            if k not in inputs:
                raise ValueError(f"missing input {k!r}")
            cs = []
            feats.append(self._run(theta, layers, np.asarray(inputs[k], dtype=float), cs))
            tower_caches[k] = cs
        widths = [f.shape[1] for f in feats]
        x = np.concatenate(feats, axis=1) if len(feats) > 1 else feats[0]
        trunk_cache = []
        x = self._run(theta, self.trunk, x, trunk_cache)
        outputs, head_caches = {}, {}
        for k, layers in self.heads.items():
            cs = []
            outputs[k] = self._run(theta, layers, x, cs)
            head_caches[k] = cs
        cache = {"net": id(self), "theta": theta, "towers": tower_caches, "widths": widths,
                 "trunk": trunk_cache, "heads": head_caches, "feat_shape": x.shape, "used": False}
        return outputs, cache

    def backward(self, theta, cache, output_grads: dict) -> np.ndarray:
        """Gradient of ``sum(output_grads[k] * outputs[k])`` w.r.t. ``theta``.

        A cache can be consumed once and only with the parameters that
        produced it.
        """
        if cache.get("net") != id(self) or cache["used"] or cache["theta"] is not theta:
            raise CacheStateError("stale or foreign forward cache")
        cache["used"] = True
        grad = np.zeros(self.size)
        dfeat = np.zeros(cache["feat_shape"])
        for k, cs in cache["heads"].items():
            if k in output_grads and output_grads[k] is not None:
                dfeat += self._back(theta, cs, np.asarray(output_grads[k], dtype=float), grad)
        dfeat = self._back(theta, cache["trunk"], dfeat, grad)
        offs = np.cumsum([0] + cache["widths"])
        for i, (k, cs) in enumerate(cache["towers"].items()):
            self._back(theta, cs, dfeat[:, offs[i]:offs[i + 1]], grad)
        return grad

    def __call__(self, theta, inputs):
        return self.forward(theta, inputs)[0]


# ---------------------------------------------------------------------------
# losses, optimizer, checkpoints

def mse_loss(pred, target, batch_count: int = 1):
    """``||pred - target||^2 / batch_count`` and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.sum(diff * diff) / batch_count), 2.0 * diff / batch_count


class SGD:
    """Plain SGD with optional heavy-ball momentum and global-norm clipping (both off by default)."""

    def __init__(self, lr: float, momentum: float = 0.0, clip_norm: float | None = None):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if clip_norm is not None and clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        self.lr, self.momentum, self.clip_norm = lr, momentum, clip_norm
        self.clipped = 0
        self._v = None

    def step(self, theta, grad):
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient")
        if self.clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > self.clip_norm:
                grad = grad * (self.clip_norm / norm)
                self.clipped += 1
        if self.momentum:
            if self._v is None:
                self._v = np.zeros_like(theta)
            self._v = self.momentum * self._v + grad
            grad = self._v
        theta -= self.lr * grad
        return theta


def sgd_step(theta, grad, lr: float):
    """Return ``theta - lr * grad`` as a new vector."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")
    return theta - lr * grad


def save_params(path, theta, net: Network | None = None, **meta):
    layout = json.dumps(net.layout.to_json()) if net is not None else ""
    np.savez(path, theta=theta, version=CHECKPOINT_VERSION, layout=layout,
             meta=json.dumps(meta, sort_keys=True))


def load_params(path, net: Network | None = None):
    with np.load(path, allow_pickle=False) as f:
        if int(f["version"]) != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version")
        theta = f["theta"].copy()
        layout = str(f["layout"])
    if net is not None:
        if theta.shape != (net.size,):
            raise ValueError("checkpoint does not match network size")
        if layout and json.loads(layout) != json.loads(json.dumps(net.layout.to_json())):
            raise ValueError("checkpoint layout does not match network")
    return theta


def numerical_gradient(f, theta, eps: float = 1e-5, idx=None):
    """Central differences of scalar ``f`` at ``theta`` (optionally a subset)."""
    theta = np.array(theta, dtype=float)
    idx = range(theta.size) if idx is None else idx
    out = {}
    for i in idx:
        old = theta[i]
        theta[i] = old + eps
        fp = f(theta)
        theta[i] = old - eps
        fm = f(theta)
        theta[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out
