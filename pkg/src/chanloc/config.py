"""Dataclass configs and structured-config loading with key-level errors."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geometry import ArrayGeometry


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; message names the key."""


def _require(mapping, key, where):
    if key not in mapping:
        raise ConfigError(f"{where}: missing required key '{key}'")
    return mapping[key]


def _check_unknown(mapping, allowed, where):
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def _interval(value, key):
    try:
        lo, hi = float(value[0]), float(value[1])
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"{key}: expected a [min, max] pair, got {value!r}") from exc
    if lo > hi:
        raise ConfigError(f"{key}: min {lo} exceeds max {hi}")
    return (lo, hi)


@dataclass(frozen=True)
class ScenarioConfig:
    """Geometry and sampling parameters for synthetic scenes.

    Region bounds are in world coordinates; the BS position is subtracted when
    the scenario is generated so all model math sees the BS at the origin.
    """

    num_users: int = 8
    num_scatterers: int = 6
    paths_per_user: int = 3
    region_x: tuple = (50.0, 250.0)
    region_y: tuple = (-100.0, 100.0)
    region_z: tuple = (1.5, 1.5)
    scatterer_z: tuple = (1.5, 15.0)
    bs_position: tuple = (-50.0, 0.0, 25.0)
    nx: int = 4
    ny: int = 4
    spacing: float = 0.5
    carrier_hz: float = 3.5e9
    subcarriers: int = 32
    subcarrier_spacing_hz: float = 30e3
    prior_std_m: float = 5.0
    los_probability: float = 0.9
    min_scatterer_sep_m: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.num_users < 1:
            raise ConfigError("num_users: must be >= 1")
        if self.num_scatterers < 1:
            raise ConfigError("num_scatterers: must be >= 1")
        if not 1 <= self.paths_per_user <= self.num_scatterers:
            raise ConfigError(
                f"paths_per_user: must be in [1, num_scatterers={self.num_scatterers}], "
                f"got {self.paths_per_user}"
            )
        for key in ("region_x", "region_y", "region_z", "scatterer_z"):
            object.__setattr__(self, key, _interval(getattr(self, key), key))
        if self.subcarriers < 1:
            raise ConfigError("subcarriers: must be >= 1")
        if self.subcarrier_spacing_hz <= 0:
            raise ConfigError("subcarrier_spacing_hz: must be > 0")
        if not 0.0 <= self.los_probability <= 1.0:
            raise ConfigError("los_probability: must be in [0, 1]")
        if self.prior_std_m < 0:
            raise ConfigError("prior_std_m: must be >= 0")

    @property
    def array(self) -> ArrayGeometry:
        return ArrayGeometry(self.nx, self.ny, self.spacing, self.carrier_hz)

    @property
    def overlap(self) -> float:
        """Expected per-user share of the global scatterer set, L_k / L."""
        return self.paths_per_user / self.num_scatterers

    @classmethod
    def from_mapping(cls, mapping, where="scenario") -> "ScenarioConfig":
        if not isinstance(mapping, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
        names = {f.name for f in dataclasses.fields(cls)}
        _check_unknown(mapping, names, where)
        try:
            return cls(**mapping)
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class MusicConfig:
    """Search grids and tolerances for the joint angle-delay estimator."""

    az_step_deg: float = 2.0
    el_step_deg: float = 2.0
    az_range_deg: tuple = (0.0, 360.0)
    el_range_deg: tuple = (2.0, 178.0)
    delay_oversample: int = 8
    max_delay_fraction: float = 1.0  # of the 1/f0 unambiguous range
    max_paths: int = 8
    model_order: int | None = None  # None = MDL
    subarray_x: int | None = None  # spatial-smoothing subarray; None = auto
    subarray_y: int | None = None
    max_delays_per_direction: int = 2
    peak_exclusion_cells: int = 3
    smoothing_fraction: float = 0.5
    los_delay_tol_s: float | None = None  # None = resolution-based default
    los_angle_tol_rad: float = 0.35
    sigma_scatterer_m: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "az_range_deg", _interval(self.az_range_deg, "az_range_deg"))
        object.__setattr__(self, "el_range_deg", _interval(self.el_range_deg, "el_range_deg"))
        if self.delay_oversample < 1:
            raise ConfigError("delay_oversample: must be >= 1")
        if not 0.05 <= self.smoothing_fraction <= 0.9:
            raise ConfigError("smoothing_fraction: must be in [0.05, 0.9]")
        if self.max_paths < 1:
            raise ConfigError("max_paths: must be >= 1")


@dataclass(frozen=True)
class AssociationConfig:
    eps_m: float | None = None  # None = 3 * sigma_scatterer_m
    min_pts: int = 2

    def __post_init__(self):
        if self.eps_m is not None and self.eps_m <= 0:
            raise ConfigError("eps_m: must be > 0")
        if self.min_pts < 1:
            raise ConfigError("min_pts: must be >= 1")


@dataclass(frozen=True)
class GroupingConfig:
    particles: int = 50
    c1: float = 2.0
    c2: float = 2.0
    max_iterations: int = 500
    stagnation_window: int = 60
    delta_frac: float = 0.05  # outer d_adj step, fraction of d_adj0
    velocity_limit: int | None = None  # None = 2 * num groups

    def __post_init__(self):
        if self.particles < 1:
            raise ConfigError("particles: must be >= 1")
        if not 0 < self.delta_frac <= 1:
            raise ConfigError("delta_frac: must be in (0, 1]")
        if self.stagnation_window < 1:
            raise ConfigError("stagnation_window: must be >= 1")


@dataclass(frozen=True)
class TurboConfig:
    support_prob: float = 0.8  # lambda, prior activity of a joint-support entry
    los_prob: float = 0.9
    sigma_nlos: float = 1.0
    sigma_los: float = 1.0
    inner_iters: int = 12
    outer_iters: int = 12
    damping: float = 0.5
    estep_tol: float = 1e-6
    zeta_tol_m: float = 1e-2
    mstep_ascent_steps: int = 4
    mstep_init_step_m: float = 5.0
    mstep_backtracks: int = 12
    grid_padding: int = 12
    mu_padding_per_user: int = 6
    padding_support_prob: float = 0.1
    refine_positions: bool = True
    var_min: float = 1e-12
    var_max: float = 1e12

    def __post_init__(self):
        if not 0.0 <= self.support_prob <= 1.0:
            raise ConfigError("support_prob: must be in [0, 1]")
        if not 0.0 <= self.los_prob <= 1.0:
            raise ConfigError("los_prob: must be in [0, 1]")
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError("damping: must be in (0, 1]")
        if self.inner_iters < 1 or self.outer_iters < 1:
            raise ConfigError("inner_iters/outer_iters: must be >= 1")


DEFAULT_SCHEMES = ("GENIE", "MU-OP", "MU-NP", "SU-OP", "MUSIC+LS")


@dataclass(frozen=True)
class SweepConfig:
    """Full Monte-Carlo sweep: SNR x pilot-reuse-factor x scheme x trial."""

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    music: MusicConfig = field(default_factory=MusicConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    turbo: TurboConfig = field(default_factory=TurboConfig)
    snr_db: tuple = (-10.0, 0.0, 10.0)
    kappa: tuple = (2.0,)
    schemes: tuple = DEFAULT_SCHEMES
    trials: int = 50
    match_radius_m: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials: must be >= 1")
        for s in self.schemes:
            if s not in DEFAULT_SCHEMES:
                raise ConfigError(f"schemes: unknown scheme '{s}', expected one of {DEFAULT_SCHEMES}")
        for k in self.kappa:
            if k < 1:
                raise ConfigError("kappa: every pilot reduction factor must be >= 1")
        if self.match_radius_m <= 0:
            raise ConfigError("match_radius_m: must be > 0")

    @classmethod
    def from_mapping(cls, mapping, where="sweep") -> "SweepConfig":
        if not isinstance(mapping, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
        mapping = dict(mapping)
        _check_unknown(mapping, {f.name for f in dataclasses.fields(cls)}, where)
        sub = {
            "scenario": ScenarioConfig,
            "music": MusicConfig,
            "association": AssociationConfig,
            "grouping": GroupingConfig,
            "turbo": TurboConfig,
        }
        kwargs = {}
        for key, value in mapping.items():
            if key in sub:
                if not isinstance(value, dict):
                    raise ConfigError(f"{where}.{key}: expected a mapping")
                _check_unknown(value, {f.name for f in dataclasses.fields(sub[key])}, f"{where}.{key}")
                try:
                    kwargs[key] = sub[key](**value)
                except TypeError as exc:
                    raise ConfigError(f"{where}.{key}: {exc}") from exc
            elif key in ("snr_db", "kappa", "schemes"):
                kwargs[key] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from exc


def load_mapping(path) -> dict:
    """Load a YAML/JSON config file into a dict, with position-bearing errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_scenario_config(path) -> ScenarioConfig:
    return ScenarioConfig.from_mapping(load_mapping(path), where=str(path))


def load_sweep_config(path) -> SweepConfig:
    return SweepConfig.from_mapping(load_mapping(path), where=str(path))
