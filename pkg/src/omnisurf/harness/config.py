"""Run configuration and its JSON form.

Every hyperparameter of the learning schemes is a named key; missing keys
fall back to the defaults below. Symbol map for the agent and twin keys::

    gamma            discount factor
    lr               agent learning rate
    buffer_capacity  replay capacity E
    batch_size       replay mini-batch N_E
    target_period    target sync period T0
    eps_floor/decay  epsilon = max(eps_floor, eps_decay ** step)
    dataset_capacity twin dataset size D
    calib_batch      calibration mini-batch N_D
    calib_period     calibration period T1
    lr_state         next-state predictor learning rate
    lr_reward        reward predictor learning rate
    gamma_inner      digital interactions per slot
    metrics.n_r      short-term average window N_r
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from ..agent import AgentConfig
from ..channel import Geometry, MobilityParams
from ..env import ConfigurationError, EnvConfig, RewardConfig
from ..ios import DEFAULT_ES_RATIOS, DEFAULT_INCREMENTS
from ..twin import TwinConfig

MODES = ("random", "mab", "deepios", "deepios_no_branch", "deepios_twin")


@dataclass
class ScenarioConfig:
    rician_factor: float = 10.0
    n_bs: int = 5
    n_elements: int = 32
    sides: tuple = ("reflected",) * 3 + ("refracted",) * 2
    sigma_p2: float = 0.1
    sigma_k2: float = 0.5
    geometry: Geometry = field(default_factory=Geometry)
    mobility: MobilityParams = field(default_factory=MobilityParams)
    redraw_positions_each_slot: bool = False
    full_observation: bool = False


@dataclass
class CatalogConfig:
    increment_indices: tuple = DEFAULT_INCREMENTS
    es_ratios: tuple = DEFAULT_ES_RATIOS
    ms_groups: int = 5


@dataclass
class MetricsConfig:
    n_r: int = 2000
    conv_rel_tol: float = 0.01
    conv_hold: int = 1000


@dataclass
class RunConfig:
    mode: str = "deepios"
    horizon: int = 20000
    seed: int = 0
    protocol: str = "ES"
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    catalog: CatalogConfig = field(default_factory=CatalogConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    twin: TwinConfig = field(default_factory=TwinConfig)
    gamma_inner: int = 1000
    bootstrap_lambda: float = 9.0
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    log_trajectory: bool = False
    log_posteriors: bool = False

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.gamma_inner < 0:
            raise ConfigurationError("gamma_inner must be >= 0")
        if self.metrics.n_r < 1 or self.metrics.conv_hold < 1:
            raise ConfigurationError("metric windows must be >= 1")
        self.env_config().validate()
        return self

    def env_config(self, rician_factor: float | None = None) -> EnvConfig:
        s, c = self.scenario, self.catalog
        return EnvConfig(
            geometry=s.geometry, mobility=s.mobility, n_bs=s.n_bs, n_elements=s.n_elements,
            sides=tuple(s.sides),
            rician_factor=s.rician_factor if rician_factor is None else rician_factor,
            sigma_p2=s.sigma_p2, sigma_k2=s.sigma_k2, protocol=self.protocol,
            increment_indices=tuple(c.increment_indices), es_ratios=tuple(c.es_ratios),
            ms_groups=c.ms_groups, reward=self.reward, full_observation=s.full_observation,
            redraw_positions_each_slot=s.redraw_positions_each_slot)

    # -- json ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from exc
        return cls.from_dict(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    hints = {f.name: f.default_factory for f in fields.values()
             if f.default_factory is not dataclasses.MISSING}
    for k, v in d.items():
        factory = hints.get(k)
        if factory is not None and dataclasses.is_dataclass(factory):
            kw[k] = _build(factory, v, f"{where}.{k}")
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def desk_config(**overrides) -> RunConfig:
    """Single-CPU settings: single-step coefficient towers and a short inner loop.

    Gradients are capped at norm 2000, about the 99th percentile of healthy
    online training; the digital agent otherwise diverges on some seeds.
    """
    cfg = RunConfig(agent=AgentConfig(coeff_sequence="single", grad_clip=2000.0), gamma_inner=10)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg
