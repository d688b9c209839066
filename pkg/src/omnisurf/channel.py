"""Rician channels, UE mobility and the aggregated equivalent channel.

All sub-channels are unit-power Rician: a rank-1 line-of-sight part built
from uniform-linear-array steering vectors plus i.i.d. CN(0, 1) scattering.
There is no path loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class DegenerateGeometryError(ValueError):
    """Two positions that must differ coincide."""


class Side(str, Enum):
    REFLECTED = "reflected"
    REFRACTED = "refracted"


@dataclass(frozen=True)
class Geometry:
    """Positions of the BS and the surface plus the rectangle UEs roam in.

    ``ue_area`` is ``(x_min, x_max, y_min, y_max)`` in meters.
    """

    p_B: tuple = (0.0, 0.0, 10.0)
    p_O: tuple = (-2.0, 5.0, 5.0)
    ue_area: tuple = (-10.0, 10.0, -10.0, 10.0)
    ue_height: float = 1.5

    def __post_init__(self):
        x0, x1, y0, y1 = self.ue_area
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"ue_area must have positive width and depth, got {self.ue_area}")
        if np.allclose(self.p_B, self.p_O):
            raise DegenerateGeometryError("BS and surface positions coincide")


@dataclass(frozen=True)
class MobilityParams:
    """Gauss-Markov parameters. Angles in radians."""

    memory: float = 0.5
    mean_velocity: float = 1.0
    velocity_std: float = 0.5
    mean_heading: float = math.radians(30.0)
    heading_std: float = math.radians(10.0)

    def __post_init__(self):
        if not 0.0 <= self.memory <= 1.0:
            raise ValueError("memory must lie in [0, 1]")
        if self.velocity_std < 0 or self.heading_std < 0:
            raise ValueError("standard deviations must be non-negative")


@dataclass(frozen=True)
class UeState:
    position: np.ndarray
    velocity: float
    heading: float
    side: Side

    def __post_init__(self):
        if self.velocity < 0:
            raise ValueError("velocity must be non-negative")


@dataclass
class ChannelSet:
    """BS-UE (N x K), BS-surface (N x M) and surface-UE (M x K) channels."""

    h_BU: np.ndarray
    H_BO: np.ndarray
    H_OU: np.ndarray
    rician_factor: float = field(default=10.0)

    def __post_init__(self):
        n, k = self.h_BU.shape
        n2, m = self.H_BO.shape
        m2, k2 = self.H_OU.shape
        if n != n2 or m != m2 or k != k2:
            raise ValueError(
                f"inconsistent channel shapes {self.h_BU.shape}, {self.H_BO.shape}, {self.H_OU.shape}"
            )
        for a in (self.h_BU, self.H_BO, self.H_OU):
            if not np.all(np.isfinite(a)):
                raise ValueError("channel entries must be finite")

    @property
    def dims(self):
        return self.H_BO.shape[0], self.H_BO.shape[1], self.h_BU.shape[1]


def steering_vector(phi: float, length: int) -> np.ndarray:
    """ULA response ``[1, e^{j pi phi}, ..., e^{j (length-1) pi phi}]``."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return np.exp(1j * np.pi * phi * np.arange(length))


def _unit_direction(src, dst) -> np.ndarray:
    d = np.asarray(dst, dtype=float) - np.asarray(src, dtype=float)
    norm = np.linalg.norm(d)
    if norm == 0.0:
        raise DegenerateGeometryError("coincident positions")
    return d / norm


def directional_cosines(geom: Geometry) -> tuple[float, float]:
    """Cosines ``(psi_O, psi_B)`` of the BS-surface link.

    The surface array lies along the y-axis and the BS array along the
    x-axis, so each cosine is one component of the unit vector from the
    surface to the BS.
    """
    u = _unit_direction(geom.p_O, geom.p_B)
    return float(u[1]), float(u[0])


def los_matrix(psi_rx: float, psi_tx: float, rows: int, cols: int) -> np.ndarray:
    """Rank-1 LoS component ``w_rx(psi_rx) w_tx(psi_tx)^H``."""
    return np.outer(steering_vector(psi_rx, rows), steering_vector(psi_tx, cols).conj())


def sample_rician(los: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    if lam < 0:
        raise ValueError("Rician factor must be non-negative")
    los = np.asarray(los)
    nlos = (rng.standard_normal(los.shape) + 1j * rng.standard_normal(los.shape)) / np.sqrt(2.0)
    if np.isinf(lam):
        return los.astype(complex)
    return np.sqrt(lam / (lam + 1.0)) * los + np.sqrt(1.0 / (lam + 1.0)) * nlos


def _reflect(x: float, lo: float, hi: float) -> tuple[float, bool]:
    # Fold into [lo, hi]; also report whether the direction flipped.
    width = hi - lo
    y = (x - lo) % (2.0 * width)
    flipped = (int((x - lo) // width) % 2) != 0
    if y > width:
        y = 2.0 * width - y
    return lo + y, flipped


def step_mobility(state: UeState, params: MobilityParams, dt: float, geom: Geometry,
                  rng: np.random.Generator) -> UeState:
    """Advance one UE by one Gauss-Markov step.

    Velocity and heading follow ``x' = k x + (1 - k) mean + sqrt(1 - k^2) std xi``.
    The horizontal position is reflected specularly at the area edges; the
    heading is mirrored with it so the UE keeps moving inward.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    k = params.memory
    s = math.sqrt(max(0.0, 1.0 - k * k))
    xi_v, xi_h = rng.standard_normal(2)
    v = k * state.velocity + (1.0 - k) * params.mean_velocity + s * params.velocity_std * xi_v
    v = max(v, 0.0)
    heading = k * state.heading + (1.0 - k) * params.mean_heading + s * params.heading_std * xi_h

    pos = np.array(state.position, dtype=float)
    dx = v * dt * math.cos(heading)
    dy = v * dt * math.sin(heading)
    x0, x1, y0, y1 = geom.ue_area
    x, fx = _reflect(pos[0] + dx, x0, x1)
    y, fy = _reflect(pos[1] + dy, y0, y1)
    # Keep strictly inside so a UE never sits on the edge.
    eps = 1e-9 * max(x1 - x0, y1 - y0)
    x = min(max(x, x0 + eps), x1 - eps)
    y = min(max(y, y0 + eps), y1 - eps)
    if fx:
        heading = math.pi - heading
    if fy:
        heading = -heading
    heading = math.atan2(math.sin(heading), math.cos(heading))
    return UeState(np.array([x, y, pos[2]]), v, heading, state.side)


def init_ues(sides, params: MobilityParams, geom: Geometry, rng: np.random.Generator) -> list[UeState]:
    """Uniform positions in the area, velocity and heading at their means."""
    x0, x1, y0, y1 = geom.ue_area
    ues = []
    for side in sides:
        x = rng.uniform(x0, x1)
        y = rng.uniform(y0, y1)
        ues.append(UeState(np.array([x, y, geom.ue_height]), params.mean_velocity,
                           params.mean_heading, Side(side)))
    return ues


def ue_los(geom: Geometry, ues, n_bs: int, n_elem: int) -> tuple[np.ndarray, np.ndarray]:
    """LoS parts of the BS-UE (N x K) and surface-UE (M x K) channels.

    A single-antenna UE contributes a length-1 steering vector, so each
    column is just the array response towards that UE.
    """
    bs_cols, ios_cols = [], []
    for ue in ues:
        psi_bs = _unit_direction(geom.p_B, ue.position)[0]
        psi_ios = _unit_direction(geom.p_O, ue.position)[1]
        bs_cols.append(steering_vector(psi_bs, n_bs))
        ios_cols.append(steering_vector(psi_ios, n_elem))
    return np.stack(bs_cols, axis=1), np.stack(ios_cols, axis=1)


def bs_ios_los(geom: Geometry, n_bs: int, n_elem: int) -> np.ndarray:
    """LoS part of the BS-surface channel as an N x M matrix.

    Built as ``u_O u_B^H`` (surface receives from the BS) and transposed
    into the BS-side orientation used by the aggregate channel.
    """
    psi_o, psi_b = directional_cosines(geom)
    return los_matrix(psi_o, psi_b, n_elem, n_bs).T


def draw_channels(geom: Geometry, ues, n_bs: int, n_elem: int, lam: float,
                  rng: np.random.Generator) -> ChannelSet:
    los_bu, los_ou = ue_los(geom, ues, n_bs, n_elem)
    h_bu = sample_rician(los_bu, lam, rng)
    h_bo = sample_rician(bs_ios_los(geom, n_bs, n_elem), lam, rng)
    h_ou = sample_rician(los_ou, lam, rng)
    return ChannelSet(h_bu, h_bo, h_ou, lam)


def aggregate_channel(ch: ChannelSet, phi_r: np.ndarray, phi_t: np.ndarray, sides) -> np.ndarray:
    """Equivalent channel ``H_BU + H_BO Phi H_OU`` with Phi picked per UE side.

    ``phi_r``/``phi_t`` may be given as M x M diagonal matrices or as their
    length-M diagonals.
    """
    n, m, k = ch.dims
    if sides is None or len(sides) != k:
        raise ValueError(f"need one side label per UE ({k})")
    dr = np.diag(phi_r) if np.ndim(phi_r) == 2 else np.asarray(phi_r)
    dt = np.diag(phi_t) if np.ndim(phi_t) == 2 else np.asarray(phi_t)
    refl = np.array([Side(s) is Side.REFLECTED for s in sides])
    coeff = np.where(refl[None, :], dr[:, None], dt[:, None])
    return ch.h_BU + ch.H_BO @ (coeff * ch.H_OU)

