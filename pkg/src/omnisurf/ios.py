"""Surface configurations under energy splitting (ES) and mode selection (MS).

A configuration is a unit-modulus phase vector shared by reflection and
refraction plus a per-element amplitude pair. The agent moves the phase
vector by multiplying in DFT increments ``w(l / M)`` and picks amplitudes
from a small catalog.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .channel import steering_vector

#: Default increment indices (multiples of 1/M) and ES reflect/refract power ratios.
DEFAULT_INCREMENTS = (-3, -1, 0, 1, 3)
DEFAULT_ES_RATIOS = (100.0, 10.0, 1.0, 0.1, 0.01)

_MODULUS_TOL = 1e-6


class Protocol(str, Enum):
    ES = "ES"
    MS = "MS"


@dataclass(frozen=True)
class PhaseState:
    phases: np.ndarray

    def __post_init__(self):
        if not np.allclose(np.abs(self.phases), 1.0, atol=1e-9):
            raise ValueError("phases must have unit modulus")

    @classmethod
    def initial(cls, m: int) -> "PhaseState":
        return cls(np.ones(m, dtype=complex))


@dataclass(frozen=True)
class AmplitudeProfile:
    """Per-element reflect/refract amplitudes, validated against the protocol."""

    protocol: Protocol
    beta_r: np.ndarray
    beta_t: np.ndarray

    def __post_init__(self):
        br = np.asarray(self.beta_r, dtype=float)
        bt = np.asarray(self.beta_t, dtype=float)
        if br.shape != bt.shape or br.ndim != 1:
            raise ValueError("beta_r and beta_t must be equal-length vectors")
        if np.any(br < 0) or np.any(br > 1) or np.any(bt < 0) or np.any(bt > 1):
            raise ValueError("amplitudes must lie in [0, 1]")
        if Protocol(self.protocol) is Protocol.ES:
            if not np.allclose(br**2 + bt**2, 1.0, atol=1e-9):
                raise ValueError("ES requires beta_r^2 + beta_t^2 = 1")
        else:
            binary = np.isin(br, (0.0, 1.0)) & np.isin(bt, (0.0, 1.0))
            if not (np.all(binary) and np.all(br + bt == 1.0)):
                raise ValueError("MS requires binary beta_r + beta_t = 1")

    @property
    def m(self) -> int:
        return len(self.beta_r)


@dataclass(frozen=True)
class ActionCatalog:
    """Phase increments (branch 1) and amplitude profiles (branch 2)."""

    increment_indices: tuple
    phase_increments: tuple
    amplitude_options: tuple

    @property
    def n_increments(self) -> int:
        return len(self.phase_increments)

    @property
    def n_amplitudes(self) -> int:
        return len(self.amplitude_options)

    @property
    def m(self) -> int:
        return len(self.phase_increments[0])

    def to_dict(self) -> dict:
        amp = self.amplitude_options
        return {
            "protocol": Protocol(amp[0].protocol).value,
            "increment_indices": list(self.increment_indices),
            "beta_r": [a.beta_r.tolist() for a in amp],
            "beta_t": [a.beta_t.tolist() for a in amp],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionCatalog":
        proto = Protocol(d["protocol"])
        m = len(d["beta_r"][0])
        idx = tuple(int(i) for i in d["increment_indices"])
        incs = tuple(steering_vector(i / m, m) for i in idx)
        amps = tuple(AmplitudeProfile(proto, np.array(r), np.array(t))
                     for r, t in zip(d["beta_r"], d["beta_t"]))
        return cls(idx, incs, amps)


def es_amplitude_from_ratio(ratio: float) -> tuple[float, float]:
    """Amplitudes with ``beta_r^2 / beta_t^2 = ratio`` and unit total power."""
    if not ratio > 0:
        raise ValueError("ratio must be positive")
    return float(np.sqrt(ratio / (1.0 + ratio))), float(np.sqrt(1.0 / (1.0 + ratio)))


def es_profile(ratio: float, m: int) -> AmplitudeProfile:
    br, bt = es_amplitude_from_ratio(ratio)
    return AmplitudeProfile(Protocol.ES, np.full(m, br), np.full(m, bt))


def build_ms_groups(m: int, l2: int, rng: np.random.Generator) -> list[AmplitudeProfile]:
    """``l2`` random reflect/refract element groups, all distinct.

    A group identical to an earlier one is redrawn.
    """
    if l2 < 1:
        raise ValueError("L2 must be >= 1")
    if m < 63 and l2 > 2**m:
        raise ValueError(f"cannot draw {l2} distinct groups from {m} elements")
    seen, groups = set(), []
    while len(groups) < l2:
        br = rng.integers(0, 2, size=m).astype(float)
        key = br.tobytes()
        if key in seen:
            continue
        seen.add(key)
        groups.append(AmplitudeProfile(Protocol.MS, br, 1.0 - br))
    return groups


def apply_increment(state: PhaseState, delta: np.ndarray) -> PhaseState:
    delta = np.asarray(delta)
    if delta.shape != state.phases.shape:
        raise ValueError("increment length must match the number of elements")
    if not np.allclose(np.abs(delta), 1.0, atol=_MODULUS_TOL):
        raise ValueError("increment entries must have unit modulus")
    out = state.phases * delta
    # Renormalize only once rounding drift is visible, so w(0) is an exact identity.
    mod = np.abs(out)
    if np.abs(mod - 1.0).max() > 1e-12:
        out = out / mod
    return PhaseState(out)


def coefficient_matrices(state: PhaseState, amp: AmplitudeProfile) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal reflect and refract coefficient matrices."""
    return np.diag(amp.beta_r * state.phases), np.diag(amp.beta_t * state.phases)


def coefficient_diagonals(state: PhaseState, amp: AmplitudeProfile) -> tuple[np.ndarray, np.ndarray]:
    """Same as :func:`coefficient_matrices` but returns only the diagonals."""
    return amp.beta_r * state.phases, amp.beta_t * state.phases


def build_action_catalog(m: int, l1: int | None = None, l2: int | None = None,
                         protocol: Protocol | str = Protocol.ES,
                         amplitude_spec=None, rng: np.random.Generator | None = None,
                         increment_indices=None) -> ActionCatalog:
    """Assemble the two sub-action sets.

    Parameters
    ----------
    m : int
        Number of surface elements.
    l1 : int, optional
        If given without ``increment_indices``, use the full set ``-l1..l1``.
    l2 : int, optional
        Number of MS groups. For ES it is implied by ``amplitude_spec``.
    amplitude_spec : sequence of float, optional
        ES power ratios ``beta_r^2 / beta_t^2``. Defaults to
        ``(100, 10, 1, 0.1, 0.01)``.
    increment_indices : sequence of int, optional
        Explicit increment indices ``l`` giving ``w(l / m)``; defaults to
        ``(-3, -1, 0, 1, 3)``.
    """
    protocol = Protocol(protocol)
    if increment_indices is None:
        if l1 is None:
            increment_indices = DEFAULT_INCREMENTS
        else:
            if l1 < 0:
                raise ValueError("L1 must be >= 0")
            increment_indices = tuple(range(-l1, l1 + 1))
    idx = tuple(int(i) for i in increment_indices)
    if len(set(idx)) != len(idx):
        raise ValueError(f"duplicate increments in {idx}")
    if 0 not in idx:
        raise ValueError("the identity increment w(0) must be in the catalog")
    incs = tuple(steering_vector(i / m, m) for i in idx)

    if protocol is Protocol.ES:
        ratios = DEFAULT_ES_RATIOS if amplitude_spec is None else tuple(amplitude_spec)
        if l2 is not None and l2 != len(ratios):
            raise ValueError("L2 disagrees with the number of ES ratios")
        amps = tuple(es_profile(r, m) for r in ratios)
    else:
        l2 = len(DEFAULT_ES_RATIOS) if l2 is None else l2
        if rng is None:
            raise ValueError("MS catalog needs an rng for the element groups")
        amps = tuple(build_ms_groups(m, l2, rng))
    return ActionCatalog(idx, incs, amps)


def reachable_phase_lattice(m: int) -> np.ndarray:
    """Phase values (radians, in [-pi, pi)) reachable with DFT increments."""
    k = np.arange(2 * m)
    return np.mod(np.pi * k / m + np.pi, 2 * np.pi) - np.pi


def snap_to_quantized(phases: np.ndarray, bits: int) -> np.ndarray:
    """Project phases onto the uniform ``2**bits``-step grid on ``[-pi, pi]``.

    Optional post-processing only; the dynamics never call it.
    """
    step = 2 * np.pi / 2**bits
    ang = np.angle(phases)
    q = np.round((ang + np.pi) / step) * step - np.pi
    return np.exp(1j * q)
