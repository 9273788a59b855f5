"""Synthetic scenes: geometry sampling, ground-truth channels, received pilots.

The channel of user k on subcarrier p (p = 1..P) is

    h_{k,p} = x0_k * exp(-j 2 pi p f0 tau0_k) * a(user direction)
            + sum_l x_{l,k} * exp(-j 2 pi p f0 tau_l) * a(scatterer_l direction)

with tau0 the direct range delay and tau_l the two-leg bounce delay.  All
positions are stored in the BS-centred frame (the configured BS world position
is subtracted at generation time).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ScenarioConfig
from .geometry import (
    ArrayGeometry,
    SphericalPosition,
    los_delay,
    path_delay,
    steering_vector,
)


@dataclass(frozen=True)
class UserState:
    true_pos: SphericalPosition
    prior_pos: SphericalPosition


@dataclass(frozen=True)
class Scenario:
    """Immutable scene: array, users, global scatterers, per-user paths, gains."""

    array: ArrayGeometry
    users: tuple  # of UserState
    scatterers: tuple  # of SphericalPosition, the global set of size L
    user_paths: tuple  # per user, tuple of indices into `scatterers`
    los_gains: tuple  # complex per user (0 when the LOS path is absent)
    nlos_gains: tuple  # per user, tuple of complex gains aligned with user_paths
    subcarriers: int
    subcarrier_spacing_hz: float
    bs_position: tuple = (0.0, 0.0, 0.0)  # world coords, informational
    region: tuple = ()  # ((xmin,xmax),(ymin,ymax),(zmin,zmax)) in the BS frame
    seed: int = 0

    def __post_init__(self):
        for k, paths in enumerate(self.user_paths):
            if len(paths) != len(self.nlos_gains[k]):
                raise ValueError(f"user {k}: path/gain length mismatch")
            if any(not 0 <= l < len(self.scatterers) for l in paths):
                raise ValueError(f"user {k}: path index out of range")

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_scatterers(self) -> int:
        return len(self.scatterers)

    def user_scatterers(self, k) -> list:
        return [self.scatterers[l] for l in self.user_paths[k]]

    def scatterer_xyz(self) -> np.ndarray:
        return np.array([s.to_cartesian() for s in self.scatterers])

    def path_delays(self, k) -> np.ndarray:
        user = self.users[k].true_pos
        return np.array([path_delay(user, self.scatterers[l]) for l in self.user_paths[k]])

    def to_dict(self) -> dict:
        def sph(p):
            return [p.azimuth, p.elevation, p.range_m]

        return {
            "format": "chanloc-scenario-v1",
            "array": {
                "nx": self.array.nx,
                "ny": self.array.ny,
                "spacing": self.array.spacing,
                "carrier_hz": self.array.carrier_hz,
            },
            "users": [
                {"true": sph(u.true_pos), "prior": sph(u.prior_pos)} for u in self.users
            ],
            "scatterers": [sph(s) for s in self.scatterers],
            "user_paths": [list(p) for p in self.user_paths],
            "los_gains": [[g.real, g.imag] for g in self.los_gains],
            "nlos_gains": [[[g.real, g.imag] for g in gs] for gs in self.nlos_gains],
            "subcarriers": self.subcarriers,
            "subcarrier_spacing_hz": self.subcarrier_spacing_hz,
            "bs_position": list(self.bs_position),
            "region": [list(b) for b in self.region],
            "seed": self.seed,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def from_dict(cls, data) -> "Scenario":
        if data.get("format") != "chanloc-scenario-v1":
            raise ValueError(f"not a scenario file (format={data.get('format')!r})")
        arr = data["array"]
        return cls(
            array=ArrayGeometry(arr["nx"], arr["ny"], arr["spacing"], arr["carrier_hz"]),
            users=tuple(
                UserState(SphericalPosition(*u["true"]), SphericalPosition(*u["prior"]))
                for u in data["users"]
            ),
            scatterers=tuple(SphericalPosition(*s) for s in data["scatterers"]),
            user_paths=tuple(tuple(p) for p in data["user_paths"]),
            los_gains=tuple(complex(re, im) for re, im in data["los_gains"]),
            nlos_gains=tuple(
                tuple(complex(re, im) for re, im in gs) for gs in data["nlos_gains"]
            ),
            subcarriers=data["subcarriers"],
            subcarrier_spacing_hz=data["subcarrier_spacing_hz"],
            bs_position=tuple(data["bs_position"]),
            region=tuple(tuple(b) for b in data["region"]),
            seed=data["seed"],
        )

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PilotBook:
    """Unit-modulus pilot symbols, one sequence per user; shape (K, P)."""

    symbols: np.ndarray

    def __post_init__(self):
        mags = np.abs(self.symbols)
        if not np.allclose(mags, 1.0, atol=1e-9):
            raise ValueError("pilot symbols must be unit modulus")

    @classmethod
    def random_qpsk(cls, num_users, subcarriers, rng) -> "PilotBook":
        phases = rng.integers(0, 4, size=(num_users, subcarriers))
        return cls(np.exp(1j * (np.pi / 2) * phases + 1j * np.pi / 4))

    def shared_within_groups(self, groups) -> "PilotBook":
        """Reuse the lowest-index member's sequence for every user in a group."""
        symbols = self.symbols.copy()
        for members in groups:
            leader = min(members)
            for k in members:
                symbols[k] = self.symbols[leader]
        return PilotBook(symbols)


def synthesize_channel(scn: Scenario, k: int, p: int) -> np.ndarray:
    """True channel vector of user k on subcarrier p (1-based)."""
    if not 0 <= k < scn.num_users:
        raise IndexError(f"user index {k} out of range")
    if not 1 <= p <= scn.subcarriers:
        raise IndexError(f"subcarrier index {p} out of range (1..{scn.subcarriers})")
    f0 = scn.subcarrier_spacing_hz
    user = scn.users[k].true_pos
    h = scn.los_gains[k] * np.exp(-2j * np.pi * p * f0 * los_delay(user)) * steering_vector(
        user.azimuth, user.elevation, scn.array
    )
    for l, gain in zip(scn.user_paths[k], scn.nlos_gains[k]):
        s = scn.scatterers[l]
        tau = path_delay(user, s)
        h = h + gain * np.exp(-2j * np.pi * p * f0 * tau) * steering_vector(
            s.azimuth, s.elevation, scn.array
        )
    return h


def channel_matrix(scn: Scenario, k: int) -> np.ndarray:
    """True channel of user k over all subcarriers; shape (N, P)."""
    return np.stack(
        [synthesize_channel(scn, k, p) for p in range(1, scn.subcarriers + 1)], axis=1
    )


def channel_tensor(scn: Scenario) -> np.ndarray:
    """(K, N, P) stack of all users' true channels."""
    return np.stack([channel_matrix(scn, k) for k in range(scn.num_users)])


def draw_noise(scn: Scenario, noise_std, rng) -> np.ndarray:
    """Per-user circular complex noise, shape (K, N*P); std is scalar or (K,)."""
    n = scn.array.n_antennas * scn.subcarriers
    std = np.broadcast_to(np.asarray(noise_std, dtype=float), (scn.num_users,))
    z = rng.standard_normal((scn.num_users, n)) + 1j * rng.standard_normal((scn.num_users, n))
    return z * (std[:, None] / np.sqrt(2.0))


def noiseless_observation(scn: Scenario, pilots: PilotBook, k: int) -> np.ndarray:
    """u_{k,p} h_{k,p} stacked over subcarriers; shape (N*P,)."""
    H = channel_matrix(scn, k)
    return (H * pilots.symbols[k][None, :]).T.reshape(-1)


def received_pilots(scn, pilots, noise_std=0.0, rng=None, grouping=None, noise=None):
    """Received uplink pilots.

    Orthogonal mode (``grouping`` is None): returns (K, N*P), one observation
    per user.  Grouped mode: users in a group transmit simultaneously and the
    group observation sums their contributions and their noise terms; returns
    (G, N*P) ordered by group id.

    ``noise`` may carry pre-drawn per-user noise (K, N*P) so paired
    experiments can reuse one realization across pilot modes.
    """
    if noise is None:
        if rng is None:
            rng = np.random.default_rng(0)
        noise = draw_noise(scn, noise_std, rng)
    clean = np.stack(
        [noiseless_observation(scn, pilots, k) for k in range(scn.num_users)]
    )
    if grouping is None:
        return clean + noise
    groups = grouping.groups()
    assigned = sorted(k for members in groups for k in members)
    if assigned != list(range(scn.num_users)):
        missing = sorted(set(range(scn.num_users)) - set(assigned))
        raise ValueError(f"grouped users lack pilot assignment: {missing}")
    out = np.zeros((len(groups), clean.shape[1]), dtype=complex)
    for g, members in enumerate(groups):
        for k in members:
            out[g] += clean[k] + noise[k]
    return out


def _sample_box(rng, n, bounds):
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return lo + (hi - lo) * rng.random((n, 3))


def generate_scenario(cfg: ScenarioConfig, seed=None) -> Scenario:
    """Sample a scene: users and scatterers uniform in their boxes, per-user
    path subsets uniform of size paths_per_user, unit-variance complex gains,
    Gaussian-perturbed prior user positions."""
    if seed is None:
        seed = cfg.seed
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    bs = np.asarray(cfg.bs_position, dtype=float)

    user_bounds = (cfg.region_x, cfg.region_y, cfg.region_z)
    scat_bounds = (cfg.region_x, cfg.region_y, cfg.scatterer_z)
    users_xyz = _sample_box(rng, cfg.num_users, user_bounds)

    scat_xyz = _sample_box(rng, cfg.num_scatterers, scat_bounds)
    if cfg.min_scatterer_sep_m > 0:
        for _ in range(200):
            d = np.linalg.norm(scat_xyz[:, None] - scat_xyz[None, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            bad = np.where(d.min(axis=1) < cfg.min_scatterer_sep_m)[0]
            if bad.size == 0:
                break
            scat_xyz[bad] = _sample_box(rng, bad.size, scat_bounds)

    prior_xyz = users_xyz + cfg.prior_std_m * rng.standard_normal(users_xyz.shape)

    users = tuple(
        UserState(
            SphericalPosition.from_cartesian(u - bs),
            SphericalPosition.from_cartesian(p - bs),
        )
        for u, p in zip(users_xyz, prior_xyz)
    )
    scatterers = tuple(SphericalPosition.from_cartesian(s - bs) for s in scat_xyz)

    def cgain():
        return complex(rng.standard_normal(), rng.standard_normal()) / np.sqrt(2.0)

    user_paths = []
    nlos_gains = []
    los_gains = []
    for _ in range(cfg.num_users):
        chosen = rng.choice(cfg.num_scatterers, size=cfg.paths_per_user, replace=False)
        user_paths.append(tuple(int(l) for l in sorted(chosen)))
        nlos_gains.append(tuple(cgain() for _ in range(cfg.paths_per_user)))
        los_gains.append(cgain() if rng.random() < cfg.los_probability else 0j)

    region_bs = tuple(
        (lo - b, hi - b) for (lo, hi), b in zip(scat_bounds, bs)
    )
    return Scenario(
        array=cfg.array,
        users=users,
        scatterers=scatterers,
        user_paths=tuple(user_paths),
        los_gains=tuple(los_gains),
        nlos_gains=tuple(nlos_gains),
        subcarriers=cfg.subcarriers,
        subcarrier_spacing_hz=cfg.subcarrier_spacing_hz,
        bs_position=tuple(bs.tolist()),
        region=region_bs,
        seed=int(seed),
    )
