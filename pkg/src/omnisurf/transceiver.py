"""Two-stage slot: uplink pilots with MMSE estimation, then ZF downlink."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class NumericalSingularityError(np.linalg.LinAlgError):
    pass


class PrecoderSingularityError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class PilotConfig:
    X_p: np.ndarray
    sigma_p2: float = 0.1

    def __post_init__(self):
        x = np.asarray(self.X_p)
        if x.ndim != 2 or x.shape[0] != x.shape[1]:
            raise ValueError("pilot matrix must be square K x K")
        if np.linalg.matrix_rank(x) < x.shape[0]:
            raise ValueError("pilot matrix must have full rank")
        if self.sigma_p2 < 0:
            raise ValueError("pilot noise variance must be non-negative")

    @classmethod
    def orthogonal(cls, k: int, sigma_p2: float = 0.1, power: float = 1.0) -> "PilotConfig":
        return cls(np.sqrt(power) * np.eye(k, dtype=complex), sigma_p2)


@dataclass(frozen=True)
class LinkResult:
    sinr: np.ndarray
    rate: np.ndarray

    @property
    def sum_rate(self) -> float:
        return float(np.sum(self.rate))


def complex_normal(shape, variance: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. circularly symmetric CN(0, variance) samples."""
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def uplink_pilot(H: np.ndarray, cfg: PilotConfig, rng: np.random.Generator) -> np.ndarray:
    """Received pilot block ``Y_p = H X_p + N``."""
    if H.shape[1] != cfg.X_p.shape[0]:
        raise ValueError("channel columns must match the pilot matrix size")
    y = H @ cfg.X_p
    if cfg.sigma_p2 > 0:
        y = y + complex_normal(y.shape, cfg.sigma_p2, rng)
    return y


def mmse_estimate(Y_p: np.ndarray, cfg: PilotConfig) -> np.ndarray:
    """``H_hat = Y_p X_p^H (X_p X_p^H + sigma_p^2 I)^{-1}``."""
    X = cfg.X_p
    gram = X @ X.conj().T + cfg.sigma_p2 * np.eye(X.shape[0])
    if np.linalg.cond(gram) > 1e12:
        raise NumericalSingularityError("regularized pilot Gram matrix is singular")
    # Solve from the right: H_hat gram = Y_p X^H.
    rhs = Y_p @ X.conj().T
    return np.linalg.solve(gram.T, rhs.T).T


def zf_precoder(H_hat: np.ndarray, cond_cap: float = 1e10) -> np.ndarray:
    """Row-normalized zero-forcing precoder ``V`` (K x N), row k is ``v_k^H``."""
    n, k = H_hat.shape
    if n < k:
        raise PrecoderSingularityError(f"ZF needs N >= K, got N={n}, K={k}")
    gram = H_hat.conj().T @ H_hat
    if not np.all(np.isfinite(gram)) or np.linalg.cond(gram) > cond_cap:
        raise PrecoderSingularityError("estimated channel Gram matrix is ill-conditioned")
    v = np.linalg.solve(gram, H_hat.conj().T)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def evaluate_link(V: np.ndarray, H: np.ndarray, sigma_k2) -> LinkResult:
    """Per-UE SINR and rate for precoder rows ``V`` over the true channel ``H``."""
    sigma_k2 = np.broadcast_to(np.asarray(sigma_k2, dtype=float), (H.shape[1],))
    if np.any(sigma_k2 <= 0):
        raise ValueError("UE noise variance must be positive")
    g = np.abs(V @ H) ** 2          # g[l, k] = |v_l^H h_k|^2
    signal = np.diag(g)
    interference = g.sum(axis=0) - signal
    sinr = signal / (interference + sigma_k2)
    return LinkResult(sinr, np.log2(1.0 + sinr))


def transmit_slot(H: np.ndarray, pilot: PilotConfig, sigma_k2, rng: np.random.Generator,
                  cond_cap: float = 1e10) -> tuple[np.ndarray, LinkResult]:
    """Estimate the channel, precode on the estimate and score on ``H``.

    A singular estimate yields zero rate for every UE instead of raising.
    """
    h_hat = mmse_estimate(uplink_pilot(H, pilot, rng), pilot)
    try:
        V = zf_precoder(h_hat, cond_cap)
    except PrecoderSingularityError as exc:
        log.warning("slot scored zero: %s", exc)
        k = H.shape[1]
        return h_hat, LinkResult(np.zeros(k), np.zeros(k))
    return h_hat, evaluate_link(V, H, sigma_k2)
