"""Slot-level environment for surface configuration in a MU-MIMO downlink.

One call to :meth:`SurfaceEnv.step` is one slot:

1. apply the phase increment and the amplitude choice,
2. move the UEs, redraw the scattering, recompute LoS from the new positions,
3. build the aggregated channel,
4. pilot round + MMSE estimate,
5. ZF on the estimate, scored on the true channel,
6. thresholded reward,
7. the next observation from the new estimate and the applied coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import channel as chn
from .ios import (
    DEFAULT_ES_RATIOS,
    DEFAULT_INCREMENTS,
    ActionCatalog,
    PhaseState,
    Protocol,
    apply_increment,
    build_action_catalog,
    coefficient_diagonals,
)
from .transceiver import LinkResult, PilotConfig, transmit_slot


class ConfigurationError(ValueError):
    pass


class EnvStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    r_threshold: float = 10.0
    penalty: float = 20.0

    def __post_init__(self):
        if self.penalty < 0:
            raise ValueError("penalty must be non-negative")


def reward_from_sum_rate(sum_rate: float, cfg: RewardConfig) -> float:
    if sum_rate >= cfg.r_threshold:
        return float(sum_rate)
    return float(sum_rate - cfg.penalty)


@dataclass(frozen=True)
class JointAction:
    increment_index: int
    amplitude_index: int


@dataclass(frozen=True)
class Observation:
    """Estimated channel and previous-slot coefficients as real tensors.

    ``h_hat`` is ``2 x N x K``. The coefficient tensors are ``2 x M``
    (diagonals only) in compact mode or ``2 x M x M`` in full mode.
    """

    h_hat: np.ndarray
    phi_r_prev: np.ndarray
    phi_t_prev: np.ndarray

    @property
    def full(self) -> bool:
        return self.phi_r_prev.ndim == 3

    def compact(self) -> "Observation":
        if not self.full:
            return self
        d = lambda a: np.stack([np.diagonal(a[0]), np.diagonal(a[1])])
        return Observation(self.h_hat, d(self.phi_r_prev), d(self.phi_t_prev))

    def equals(self, other: "Observation") -> bool:
        return (np.array_equal(self.h_hat, other.h_hat)
                and np.array_equal(self.phi_r_prev, other.phi_r_prev)
                and np.array_equal(self.phi_t_prev, other.phi_t_prev))


def to_real(z: np.ndarray) -> np.ndarray:
    out = np.empty((2,) + z.shape)
    out[0] = z.real
    out[1] = z.imag
    return out


def coeff_tensor(diag: np.ndarray, full: bool) -> np.ndarray:
    if full:
        return to_real(np.diag(diag))
    return to_real(diag)


def make_observation(h_hat: np.ndarray, diag_r: np.ndarray, diag_t: np.ndarray,
                     full: bool = False) -> Observation:
    return Observation(to_real(h_hat), coeff_tensor(diag_r, full), coeff_tensor(diag_t, full))


@dataclass
class EnvConfig:
    geometry: chn.Geometry = field(default_factory=chn.Geometry)
    mobility: chn.MobilityParams = field(default_factory=chn.MobilityParams)
    n_bs: int = 5
    n_elements: int = 32
    sides: tuple = ("reflected",) * 3 + ("refracted",) * 2
    rician_factor: float = 10.0
    sigma_p2: float = 0.1
    sigma_k2: float = 0.5
    protocol: str = "ES"
    increment_indices: tuple = DEFAULT_INCREMENTS
    es_ratios: tuple = DEFAULT_ES_RATIOS
    ms_groups: int = 5
    reward: RewardConfig = field(default_factory=RewardConfig)
    full_observation: bool = False
    redraw_positions_each_slot: bool = False
    slot_duration: float = 1.0
    cond_cap: float = 1e10

    @property
    def n_ues(self) -> int:
        return len(self.sides)

    def validate(self):
        if self.n_bs < self.n_ues:
            raise ConfigurationError("ZF needs at least as many BS antennas as UEs")
        if self.n_elements < 1 or self.n_bs < 1 or self.n_ues < 1:
            raise ConfigurationError("array sizes must be positive")
        if self.rician_factor < 0:
            raise ConfigurationError("Rician factor must be non-negative")
        if self.sigma_k2 <= 0 or self.sigma_p2 < 0:
            raise ConfigurationError("noise variances out of range")
        try:
            Protocol(self.protocol)
            for s in self.sides:
                chn.Side(s)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc


class SurfaceEnv:
    """Continuing-task environment; there are no terminal states.

    The catalog is built once from ``seed`` (MS groups are random) and kept
    across resets; everything else is redrawn by :meth:`reset`.
    """

    def __init__(self, config: EnvConfig | None = None, seed: int | None = 0,
                 catalog: ActionCatalog | None = None):
        self.config = replace(config) if config is not None else EnvConfig()
        self.config.validate()
        self._seed = seed
        self.rng = np.random.default_rng(seed)
        cfg = self.config
        self.catalog = catalog or build_action_catalog(
            cfg.n_elements, protocol=cfg.protocol, amplitude_spec=cfg.es_ratios,
            l2=None if Protocol(cfg.protocol) is Protocol.ES else cfg.ms_groups,
            rng=np.random.default_rng([0 if seed is None else seed, 7919]),
            increment_indices=cfg.increment_indices)
        self.pilot = PilotConfig.orthogonal(cfg.n_ues, cfg.sigma_p2)
        self._ready = False

    # -- state ---------------------------------------------------------------
    def action_count(self) -> tuple[int, int]:
        return self.catalog.n_increments, self.catalog.n_amplitudes

    def reset(self, seed: int | None = None) -> Observation:
        cfg = self.config
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.phase = PhaseState.initial(cfg.n_elements)
        self.amp_index = 0
        self.ues = chn.init_ues(cfg.sides, cfg.mobility, cfg.geometry, self.rng)
        self.slot = 0
        self._ready = True
        obs, _ = self._transmit()
        return obs

    @property
    def amplitude(self):
        return self.catalog.amplitude_options[self.amp_index]

    def coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """Diagonals of the coefficient matrices currently applied."""
        return coefficient_diagonals(self.phase, self.amplitude)

    def _transmit(self) -> tuple[Observation, LinkResult]:
        cfg = self.config
        self.channels = chn.draw_channels(cfg.geometry, self.ues, cfg.n_bs, cfg.n_elements,
                                          cfg.rician_factor, self.rng)
        d_r, d_t = self.coefficients()
        self.H = chn.aggregate_channel(self.channels, d_r, d_t, cfg.sides)
        h_hat, link = transmit_slot(self.H, self.pilot, cfg.sigma_k2, self.rng, cfg.cond_cap)
        self.h_hat = h_hat
        return make_observation(h_hat, d_r, d_t, cfg.full_observation), link

    def _move(self):
        cfg = self.config
        if cfg.redraw_positions_each_slot:
            self.ues = chn.init_ues(cfg.sides, cfg.mobility, cfg.geometry, self.rng)
        else:
            self.ues = [chn.step_mobility(u, cfg.mobility, cfg.slot_duration, cfg.geometry, self.rng)
                        for u in self.ues]

    def step(self, action: JointAction) -> tuple[Observation, float, LinkResult]:
        if not self._ready:
            raise EnvStateError("call reset() before step()")
        n1, n2 = self.action_count()
        a1, a2 = int(action.increment_index), int(action.amplitude_index)
        if not (0 <= a1 < n1 and 0 <= a2 < n2):
            raise ValueError(f"action {action} outside ({n1}, {n2})")
        self.phase = apply_increment(self.phase, self.catalog.phase_increments[a1])
        self.amp_index = a2
        self._move()
        obs, link = self._transmit()
        self.slot += 1
        return obs, reward_from_sum_rate(link.sum_rate, self.config.reward), link

    def set_rician_factor(self, lam: float):
        self.config.rician_factor = float(lam)
