"""End-to-end estimation flows shared by the CLI and the experiment harness.

A trial fixes one scene, one orthogonal pilot book, and one unit-variance
noise draw; every scheme and SNR re-uses them (noise is scaled, never
redrawn), so comparisons are paired.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .association import AssociationResult, associate
from .baselines import estimate_ls, genie_lmmse
from .config import AssociationConfig, MusicConfig, TurboConfig
from .dictionary import Grid
from .geometry import SphericalPosition
from .grouping import GroupAssignment
from .metrics import LocalizationMetrics, localization_metrics
from .music import CoarseResult, coarse_scatterers, estimate_angles_delays
from .scene import PilotBook, Scenario, channel_tensor, received_pilots
from .turbo import SparsityPrior, TurboProblem, TurboResult, run_turbo


@dataclass
class Trial:
    scenario: Scenario
    pilots: PilotBook  # orthogonal per-user sequences
    unit_noise: np.ndarray  # (K, N*P), unit variance
    noise_var: float
    y_orth: np.ndarray  # (K, N*P)
    h_true: np.ndarray  # (K, N, P)

    def user_observation(self, k) -> np.ndarray:
        """(N, P) matrix view of user k's stacked observation."""
        scn = self.scenario
        return self.y_orth[k].reshape(scn.subcarriers, scn.array.n_antennas).T


def make_trial(scenario: Scenario, snr_db, pilot_rng, noise_rng) -> Trial:
    """Draw pilots and noise for one trial at the given per-entry SNR.

    SNR is defined as mean per-antenna-per-subcarrier channel power over the
    noise variance, evaluated on this trial's true channel.
    """
    h_true = channel_tensor(scenario)
    p_sig = float(np.mean(np.abs(h_true) ** 2))
    noise_var = p_sig * 10.0 ** (-snr_db / 10.0)
    pilots = PilotBook.random_qpsk(scenario.num_users, scenario.subcarriers, pilot_rng)
    n = scenario.array.n_antennas * scenario.subcarriers
    unit = (
        noise_rng.standard_normal((scenario.num_users, n))
        + 1j * noise_rng.standard_normal((scenario.num_users, n))
    ) / np.sqrt(2.0)
    y = received_pilots(scenario, pilots, noise=np.sqrt(noise_var) * unit)
    return Trial(scenario, pilots, unit, noise_var, y, h_true)


@dataclass
class LongTimescale:
    raw_paths: list  # per user, PathEstimate list straight from the subspace search
    coarse: list  # per user, CoarseResult
    coarse_xyz: list  # per user (n_k, 3) Cartesian scatterer estimates
    association: AssociationResult
    grid0: np.ndarray  # (Q, 3) deduplicated refined set


def _inside_region(points, region, margin_m=30.0):
    """Keep coarse estimates near the known deployment region; near-axis
    geometries can blow the range solution up by orders of magnitude and a
    single wild point would poison the grid refinement."""
    if not region or points.shape[0] == 0:
        return points
    ok = np.ones(points.shape[0], dtype=bool)
    for axis, (lo, hi) in enumerate(region):
        ok &= (points[:, axis] >= lo - margin_m) & (points[:, axis] <= hi + margin_m)
    return points[ok]


def long_timescale(trial: Trial, music_cfg: MusicConfig, assoc_cfg: AssociationConfig) -> LongTimescale:
    """Coarse per-user localization and cross-user association."""
    scn = trial.scenario
    f0 = scn.subcarrier_spacing_hz
    raw, coarse, xyz = [], [], []
    for k in range(scn.num_users):
        Y = trial.user_observation(k)
        raw.append(estimate_angles_delays(Y, trial.pilots.symbols[k], scn.array, f0, music_cfg))
        res = coarse_scatterers(
            Y, scn.users[k].prior_pos, trial.pilots.symbols[k], scn.array, f0, music_cfg
        )
        coarse.append(res)
        points = np.array([s.to_cartesian() for s in res.scatterers]).reshape(-1, 3)
        xyz.append(_inside_region(points, scn.region))
    eps = assoc_cfg.eps_m if assoc_cfg.eps_m is not None else 3.0 * music_cfg.sigma_scatterer_m
    assoc = associate(xyz, eps=eps, min_pts=assoc_cfg.min_pts)
    return LongTimescale(raw, coarse, xyz, assoc, assoc.global_points)


@dataclass
class SchemeResult:
    h_hat: np.ndarray  # (K, N, P)
    est_scatterers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    turbo: TurboResult | None = None
    diverged: bool = False


def _prior_xyz(scn: Scenario) -> np.ndarray:
    return np.array([u.prior_pos.to_cartesian() for u in scn.users])


def _fallback_grid(scn: Scenario) -> np.ndarray:
    """Single point in front of the array, used when association finds
    nothing at all (deep-noise trials)."""
    center = np.mean(_prior_xyz(scn), axis=0)
    return center[None, :]


def _padded_grid(base, scn: Scenario, cfg: TurboConfig, rng):
    """Detected grid points plus region-covering low-prior candidates.

    The candidates guard against per-user detection misses: the gradient
    refinement can pull one onto a scatterer the coarse stage never saw,
    while their small support prior keeps them quiet in noise.
    """
    base = np.asarray(base, dtype=float).reshape(-1, 3)
    pad = cfg.grid_padding
    if pad == 0 or not scn.region:
        grid = base if base.size else _fallback_grid(scn)
        lam = np.full(len(grid), cfg.support_prob)
        return grid, lam
    lo = np.array([b[0] for b in scn.region])
    hi = np.array([b[1] for b in scn.region])
    extra = lo + (hi - lo) * rng.random((pad, 3))
    grid = np.concatenate([base, extra], axis=0) if base.size else extra
    lam = np.concatenate(
        [np.full(len(base), cfg.support_prob), np.full(pad, cfg.padding_support_prob)]
    )
    return grid, lam


def _mu_padded_grid(base, scn: Scenario, cfg: TurboConfig, num_users, rng):
    """Shared refined grid plus private region-covering candidates per user.

    Shared padding points corrupt the joint run: one user's noise fit raises
    every user's support prior there.  Private points (detached from the
    other users through the coupling mask) give each user the same
    miss-recovery channel the single-user mode gets, without cross-talk.
    """
    base = np.asarray(base, dtype=float).reshape(-1, 3)
    if not base.size:
        base = _fallback_grid(scn)
    ppu = cfg.mu_padding_per_user
    if ppu == 0 or not scn.region:
        return base, np.full(len(base), cfg.support_prob), None
    lo = np.array([b[0] for b in scn.region])
    hi = np.array([b[1] for b in scn.region])
    privates = lo + (hi - lo) * rng.random((num_users * ppu, 3))
    grid = np.concatenate([base, privates], axis=0)
    lam = np.concatenate(
        [np.full(len(base), cfg.support_prob), np.full(len(privates), cfg.padding_support_prob)]
    )
    coupling = np.zeros((num_users, len(grid)), dtype=bool)
    coupling[:, : len(base)] = True
    for k in range(num_users):
        start = len(base) + k * ppu
        coupling[k, start : start + ppu] = True
    return grid, lam, coupling


def scheme_music_ls(trial: Trial, lts: LongTimescale) -> SchemeResult:
    scn = trial.scenario
    h = np.stack(
        [
            estimate_ls(
                trial.y_orth[k], lts.raw_paths[k], trial.pilots.symbols[k],
                scn.array, scn.subcarrier_spacing_hz,
            )
            for k in range(scn.num_users)
        ]
    )
    pooled = (
        np.concatenate([x for x in lts.coarse_xyz], axis=0)
        if any(len(x) for x in lts.coarse_xyz)
        else np.zeros((0, 3))
    )
    return SchemeResult(h_hat=h, est_scatterers=pooled)


def scheme_genie(trial: Trial) -> SchemeResult:
    scn = trial.scenario
    h = np.stack(
        [
            genie_lmmse(trial.y_orth[k], scn, k, trial.pilots.symbols[k], trial.noise_var)[0]
            for k in range(scn.num_users)
        ]
    )
    return SchemeResult(h_hat=h, est_scatterers=scn.scatterer_xyz())


def scheme_su_op(trial: Trial, lts: LongTimescale, turbo_cfg: TurboConfig, rng=None) -> SchemeResult:
    """Independent per-user runs on each user's own coarse grid."""
    scn = trial.scenario
    if rng is None:
        rng = np.random.default_rng(0)
    h = np.zeros_like(trial.h_true)
    points = []
    diverged = False
    for k in range(scn.num_users):
        grid0, lam = _padded_grid(lts.coarse_xyz[k], scn, turbo_cfg, rng)
        prior = SparsityPrior(
            num_users=1,
            num_grid=grid0.shape[0],
            support_prob=lam,
            cond_prob=1.0,
            los_prob=turbo_cfg.los_prob,
            nlos_std=turbo_cfg.sigma_nlos,
            los_std=turbo_cfg.sigma_los,
        )
        problem = TurboProblem(
            y_groups=trial.y_orth[k][None, :],
            groups=[[0]],
            noise_var=trial.noise_var,
            pilots=trial.pilots.symbols[k][None, :],
            geom=scn.array,
            f0=scn.subcarrier_spacing_hz,
            grid_xyz=grid0,
            user_xyz=_prior_xyz(scn)[k][None, :],
            prior=prior,
            region=scn.region,
        )
        res = run_turbo(problem, turbo_cfg, subcarriers=scn.subcarriers)
        h[k] = res.h_hat[0]
        diverged = diverged or res.diverged
        points.extend(res.grid_xyz[res.support_nlos[0] > 0.5])
    return SchemeResult(
        h_hat=h,
        est_scatterers=np.array(points).reshape(-1, 3),
        diverged=diverged,
    )


def scheme_mu(trial: Trial, lts: LongTimescale, turbo_cfg: TurboConfig, rho,
              grouping: GroupAssignment | None = None, rng=None) -> SchemeResult:
    """Joint multi-user run on the shared refined grid.

    ``grouping`` None means orthogonal pilots (singleton groups); otherwise
    users in a group share the leader's pilot sequence and their observations
    and noise add.
    """
    scn = trial.scenario
    if rng is None:
        rng = np.random.default_rng(0)
    K = scn.num_users
    grid0, lam, coupling = _mu_padded_grid(lts.grid0, scn, turbo_cfg, K, rng)
    prior = SparsityPrior(
        num_users=K,
        num_grid=grid0.shape[0],
        support_prob=lam,
        cond_prob=rho,
        los_prob=turbo_cfg.los_prob,
        nlos_std=turbo_cfg.sigma_nlos,
        los_std=turbo_cfg.sigma_los,
        coupling=coupling,
    )
    if grouping is None:
        groups = [[k] for k in range(K)]
        pilots = trial.pilots
        y_groups = trial.y_orth
        noise_var = np.full(K, trial.noise_var)
    else:
        groups = grouping.groups()
        pilots = trial.pilots.shared_within_groups(groups)
        y_groups = received_pilots(
            scn, pilots, noise=np.sqrt(trial.noise_var) * trial.unit_noise,
            grouping=grouping,
        )
        noise_var = np.array([len(m) * trial.noise_var for m in groups])
    problem = TurboProblem(
        y_groups=y_groups,
        groups=groups,
        noise_var=noise_var,
        pilots=pilots.symbols,
        geom=scn.array,
        f0=scn.subcarrier_spacing_hz,
        grid_xyz=grid0,
        user_xyz=_prior_xyz(scn),
        prior=prior,
        region=scn.region,
    )
    res = run_turbo(problem, turbo_cfg, subcarriers=scn.subcarriers)
    return SchemeResult(
        h_hat=res.h_hat,
        est_scatterers=res.grid_xyz[res.support_joint > 0.5],
        turbo=res,
        diverged=res.diverged,
    )


def scheme_localization(trial: Trial, result: SchemeResult, match_radius) -> LocalizationMetrics:
    return localization_metrics(result.est_scatterers, trial.scenario.scatterer_xyz(), match_radius)
