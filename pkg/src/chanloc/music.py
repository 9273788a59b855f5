"""Coarse per-user scatterer localization from one orthogonal-pilot snapshot.

Stand-in for a joint angle-delay subspace estimator, decomposed as:

1. 2-D MUSIC over (azimuth, elevation) on a spatially smoothed antenna
   covariance averaged across subcarriers, with MDL model-order selection.
   Subarray averaging (plus forward-backward) is essential here: paths whose
   delays fall within one Rayleigh bin of the band are mutually coherent
   across subcarriers and would otherwise collapse the covariance rank.
2. per detected direction, beamforming across the full array and a 1-D MUSIC
   in the frequency dimension (Hankel-smoothed, forward-backward averaged)
   to pull out the delays of the paths in that beam;
3. angle-delay pairing by beamformed LS power;
4. scatterer ranges recovered from each (angle, delay) pair by inverting the
   two-leg bounce delay with a safeguarded Newton iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .config import MusicConfig
from .geometry import C_LIGHT, ArrayGeometry, SphericalPosition, direction_cosine


class RankDeficiencyError(ValueError):
    """Requested model order too large for the array/subcarrier count."""


class NonIdentifiableError(ValueError):
    """Degenerate on-axis geometry: range not determined by the delay."""


class NoRootError(ValueError):
    """Measured delay below the minimum achievable bounce delay."""


@dataclass
class PathEstimate:
    azimuth: float
    elevation: float
    delay_s: float
    power: float = 0.0
    range_m: float | None = None

    def direction(self) -> SphericalPosition:
        return SphericalPosition(self.azimuth, self.elevation, 1.0)


def mdl_order(eigvals, n_snapshots, max_order) -> int:
    """Wax-Kailath MDL source-count estimate from descending eigenvalues."""
    eigvals = np.asarray(eigvals, dtype=float)
    n = len(eigvals)
    floor = max(eigvals.max(initial=0.0), 0.0) * 1e-12 + 1e-300
    lam = np.maximum(eigvals, floor)
    best_d, best_val = 0, np.inf
    for d in range(0, min(max_order, n - 1) + 1):
        tail = lam[d:]
        log_gm = np.mean(np.log(tail))
        log_am = np.log(np.mean(tail))
        crit = -n_snapshots * (n - d) * (log_gm - log_am) + 0.5 * d * (2 * n - d) * np.log(
            max(n_snapshots, 2)
        )
        if crit < best_val:
            best_val, best_d = crit, d
    return best_d


def _direction_grid(cfg: MusicConfig):
    az_lo, az_hi = np.deg2rad(cfg.az_range_deg)
    el_lo, el_hi = np.deg2rad(cfg.el_range_deg)
    az_step = np.deg2rad(cfg.az_step_deg)
    el_step = np.deg2rad(cfg.el_step_deg)
    az = np.arange(az_lo, az_hi - 1e-12, az_step)
    el = np.arange(el_lo, el_hi + 1e-12, el_step)
    wrap = abs((az_hi - az_lo) - 2 * np.pi) < 1e-9
    return az, el, wrap


def _steering_grid(az, el, geom: ArrayGeometry):
    """(N, n_az*n_el) steering matrix over the search grid, az-major."""
    ux = np.outer(np.cos(az), np.sin(el)).ravel()
    uy = np.outer(np.sin(az), np.sin(el)).ravel()
    mn = geom.element_indices()
    phase = 2 * np.pi * geom.spacing * (
        mn[:, 0][:, None] * ux[None, :] + mn[:, 1][:, None] * uy[None, :]
    )
    return np.exp(1j * phase)


def _greedy_peaks_2d(spec, n_peaks, excl, wrap_az, mirror_j=None):
    """Strongest local maxima with an exclusion radius.  A planar array
    cannot tell elevation el from pi - el (identical steering), so a peak
    also excludes the mirrored elevation cell when the grid contains it."""
    rows, cols = spec.shape
    local = spec >= maximum_filter(spec, size=3, mode=("wrap" if wrap_az else "nearest", "nearest"))
    order = np.argsort(np.where(local, spec, -np.inf).ravel())[::-1]
    peaks = []
    for idx in order:
        if len(peaks) >= n_peaks:
            break
        i, j = divmod(int(idx), cols)
        if not local[i, j]:
            break
        ok = True
        for pi, pj in peaks:
            di = abs(i - pi)
            if wrap_az:
                di = min(di, rows - di)
            if max(di, abs(j - pj)) <= excl:
                ok = False
                break
            if mirror_j is not None and mirror_j[pj] >= 0 and max(di, abs(j - mirror_j[pj])) <= excl:
                ok = False
                break
        if ok:
            peaks.append((i, j))
    return peaks


def _greedy_peaks_1d(spec, n_peaks, excl):
    local = spec >= maximum_filter(spec, size=3, mode="nearest")
    order = np.argsort(np.where(local, spec, -np.inf))[::-1]
    peaks = []
    for idx in order:
        if len(peaks) >= n_peaks or not local[int(idx)]:
            break
        if all(abs(int(idx) - p) > excl for p in peaks):
            peaks.append(int(idx))
    return peaks


def _parabolic_refine(values, idx, step):
    """Sub-cell vertex of a log-parabola through three points, clamped to
    half a cell; returns the offset to add to the grid value at idx."""
    if idx <= 0 or idx >= len(values) - 1:
        return 0.0
    y0, y1, y2 = np.log(np.maximum(values[idx - 1 : idx + 2], 1e-300))
    denom = y0 - 2 * y1 + y2
    if denom >= 0:
        return 0.0
    offset = 0.5 * (y0 - y2) / denom
    return float(np.clip(offset, -0.5, 0.5)) * step


def _noise_subspace(cov, order):
    eigvals, eigvecs = np.linalg.eigh(cov)
    # ascending from eigh; noise subspace = smallest n - order
    return eigvecs[:, : cov.shape[0] - order], eigvals[::-1]


def _auto_subarray(n):
    return max(2, min(n, int(np.ceil(0.75 * n))))


def _smoothed_covariance(Y, geom: ArrayGeometry, sx, sy):
    """Subarray-averaged, forward-backward spatial covariance.

    Y is (N, P); the result is (sx*sy, sx*sy) with snapshot count
    offsets * P * 2.  Subarray translation only shifts the steering phase,
    so the subarray manifold is the (sx, sy) UPA manifold.
    """
    P = Y.shape[1]
    cube = Y.reshape(geom.nx, geom.ny, P)
    dim = sx * sy
    cov = np.zeros((dim, dim), dtype=complex)
    n_off = 0
    for ox in range(geom.nx - sx + 1):
        for oy in range(geom.ny - sy + 1):
            block = cube[ox : ox + sx, oy : oy + sy, :].reshape(dim, P)
            cov += block @ block.conj().T
            n_off += 1
    cov /= n_off * P
    J = np.eye(dim)[::-1]
    cov = 0.5 * (cov + J @ cov.conj() @ J)
    return cov, n_off * P * 2


def estimate_angles_delays(Y, pilots, geom: ArrayGeometry, f0, cfg: MusicConfig = MusicConfig()):
    """Joint angle-delay estimates from one (N, P) observation.

    Returns a power-sorted list of PathEstimate (angles and delays only).
    """
    Y = np.asarray(Y, dtype=complex)
    N, P = Y.shape
    if N != geom.n_antennas:
        raise ValueError("observation/antenna mismatch")
    sx = cfg.subarray_x or _auto_subarray(geom.nx)
    sy = cfg.subarray_y or _auto_subarray(geom.ny)
    sx, sy = min(sx, geom.nx), min(sy, geom.ny)
    n_eff = sx * sy
    if cfg.model_order is not None and (cfg.model_order >= n_eff or cfg.model_order > P):
        raise RankDeficiencyError(
            f"model order {cfg.model_order} needs more antennas/subcarriers "
            f"(smoothed aperture {n_eff}, P={P})"
        )
    if float(np.mean(np.abs(Y) ** 2)) < 1e-24:
        return []

    cov, n_snap = _smoothed_covariance(Y, geom, sx, sy)
    sub_geom = ArrayGeometry(sx, sy, geom.spacing, geom.carrier_hz)
    eigvals = np.linalg.eigvalsh(cov)[::-1]
    if cfg.model_order is not None:
        n_dirs = cfg.model_order
    else:
        n_dirs = mdl_order(eigvals, n_snap, min(cfg.max_paths, n_eff - 1, P))
    if n_dirs == 0:
        return []

    En, _ = _noise_subspace(cov, n_dirs)
    az, el, wrap = _direction_grid(cfg)
    A = _steering_grid(az, el, sub_geom) / np.sqrt(n_eff)
    spec = 1.0 / np.maximum(np.sum(np.abs(En.conj().T @ A) ** 2, axis=0), 1e-30)
    spec2d = spec.reshape(len(az), len(el))
    el_step = el[1] - el[0] if len(el) > 1 else 1.0
    mirror = np.round((np.pi - el - el[0]) / el_step).astype(int)
    mirror_j = np.where(
        (mirror >= 0) & (mirror < len(el)) & (np.abs(el[0] + mirror * el_step - (np.pi - el)) < 0.5 * el_step),
        mirror,
        -1,
    )
    peaks = _greedy_peaks_2d(spec2d, n_dirs, cfg.peak_exclusion_cells, wrap, mirror_j)

    depiloted = Y / np.asarray(pilots)[None, :]
    delay_step = 1.0 / (f0 * P * cfg.delay_oversample)
    tau_grid = np.arange(0.0, cfg.max_delay_fraction / f0, delay_step)
    M = max(2, int(round(P * cfg.smoothing_fraction)))
    n_snap = P - M + 1
    window = np.exp(-2j * np.pi * f0 * np.outer(np.arange(M), tau_grid))  # (M, n_tau)

    estimates = []
    for i, j in peaks:
        az_i = az[i] + _parabolic_refine(spec2d[:, j], i, az[1] - az[0] if len(az) > 1 else 0.0)
        el_j = el[j] + _parabolic_refine(spec2d[i, :], j, el[1] - el[0] if len(el) > 1 else 0.0)
        ux, uy = np.cos(az_i) * np.sin(el_j), np.sin(az_i) * np.sin(el_j)
        mn = geom.element_indices()
        a = np.exp(2j * np.pi * geom.spacing * (mn[:, 0] * ux + mn[:, 1] * uy))
        s = (a.conj() @ depiloted) / N  # (P,)

        hank = np.lib.stride_tricks.sliding_window_view(s, M)  # (n_snap, M)
        r_s = (hank.conj().T @ hank).conj() / n_snap
        flip = np.flip(np.flip(r_s, 0), 1)
        r_s = 0.5 * (r_s + flip.conj())  # forward-backward averaging
        ev_s = np.linalg.eigvalsh(r_s)[::-1]
        n_del = max(1, mdl_order(ev_s, n_snap, min(cfg.max_delays_per_direction, M - 1)))
        En_s, _ = _noise_subspace(r_s, n_del)
        spec_tau = 1.0 / np.maximum(np.sum(np.abs(En_s.conj().T @ (window / np.sqrt(M))) ** 2, axis=0), 1e-30)
        tau_peaks = _greedy_peaks_1d(spec_tau, n_del, cfg.delay_oversample)
        taus = [
            tau_grid[t] + _parabolic_refine(spec_tau, t, delay_step) for t in tau_peaks
        ]
        # beamformed LS power for pairing and pruning
        basis = np.exp(-2j * np.pi * f0 * np.outer(np.arange(1, P + 1), taus))
        amps, *_ = np.linalg.lstsq(basis, s, rcond=None)
        powers = np.abs(amps) ** 2
        top = float(powers.max(initial=0.0))
        for tau, pw in zip(taus, powers):
            if pw >= 0.02 * top:
                estimates.append(PathEstimate(float(az_i % (2 * np.pi)), float(el_j), float(tau), float(pw)))

    estimates.sort(key=lambda e: -e.power)
    return estimates[: cfg.max_paths]


def _bounce_delay_of_range(r, user_range, cos_angle):
    return (np.sqrt(user_range**2 + r**2 - 2 * user_range * r * cos_angle) + r) / C_LIGHT


def solve_range(delay_s, cos_angle, user_range_m, tol_s=1e-12, max_iter=100, flat_tol_s=2e-9):
    """Invert the two-leg bounce delay for the scatterer range.

    The delay is nondecreasing in range with minimum user_range/c at r=0, so a
    bracketing Newton/bisection hybrid is safe.  Degenerate on-axis geometry
    (cos_angle ~ 1 with the delay pinned at the direct delay, to within the
    measurement-scale flat_tol_s) raises NonIdentifiableError; delays below
    the floor raise NoRootError.
    """
    tau0 = user_range_m / C_LIGHT
    slack = tol_s + 1e-9 * tau0
    if cos_angle >= 1.0 - 1e-6 and abs(delay_s - tau0) <= max(slack, flat_tol_s):
        raise NonIdentifiableError(
            "on-axis geometry: delay equals the direct delay for every range "
            f"up to {user_range_m:.1f} m"
        )
    if delay_s < tau0 - slack:
        raise NoRootError(
            f"delay {delay_s:.3e}s below the direct-path floor {tau0:.3e}s"
        )
    lo, hi = 0.0, C_LIGHT * delay_s + user_range_m
    r = min(max(C_LIGHT * delay_s - user_range_m, 0.5 * (lo + hi)), hi)
    for _ in range(max_iter):
        f = _bounce_delay_of_range(r, user_range_m, cos_angle) - delay_s
        if f > 0:
            hi = r
        else:
            lo = r
        root = np.sqrt(max(user_range_m**2 + r**2 - 2 * user_range_m * r * cos_angle, 0.0))
        if root > 0:
            df = ((r - user_range_m * cos_angle) / root + 1.0) / C_LIGHT
        else:
            df = 0.0
        if df > 0 and abs(f) > 0:
            r_new = r - f / df
        else:
            r_new = 0.5 * (lo + hi)
        if not lo < r_new < hi:
            r_new = 0.5 * (lo + hi)
        if abs(r_new - r) <= 1e-12 * max(1.0, abs(r)) and abs(f) <= tol_s:
            return float(r_new)
        r = r_new
    f = _bounce_delay_of_range(r, user_range_m, cos_angle) - delay_s
    if abs(f) <= tol_s:
        return float(r)
    raise NoRootError(f"range iteration failed to converge (residual {f:.3e}s)")


@dataclass
class CoarseResult:
    scatterers: list  # SphericalPosition
    paths: list  # PathEstimate with range filled where solvable
    dropped: list = field(default_factory=list)  # (PathEstimate, reason)


def coarse_scatterers(Y, prior_user: SphericalPosition, pilots, geom, f0,
                      cfg: MusicConfig = MusicConfig(), exclude_los=True) -> CoarseResult:
    """Per-user coarse scatterer positions from angles, delays and ranges.

    The path best matching the direct path (delay near range/c, direction
    near the prior user direction) is excluded; non-identifiable or rootless
    paths are dropped with a diagnostic.
    """
    paths = estimate_angles_delays(Y, pilots, geom, f0, cfg)
    P = np.asarray(pilots).shape[0]
    tau0 = prior_user.range_m / C_LIGHT
    delay_tol = cfg.los_delay_tol_s
    if delay_tol is None:
        delay_tol = 4.0 / (f0 * P * cfg.delay_oversample) + 100.0 / C_LIGHT

    dropped = []
    if exclude_los and paths:
        best, best_score = None, np.inf
        for est in paths:
            ddel = abs(est.delay_s - tau0)
            dang = np.arccos(np.clip(direction_cosine(est.direction(), prior_user), -1, 1))
            if ddel <= delay_tol and dang <= cfg.los_angle_tol_rad:
                score = ddel / delay_tol + dang / cfg.los_angle_tol_rad
                if score < best_score:
                    best, best_score = est, score
        if best is not None:
            paths = [p for p in paths if p is not best]
            dropped.append((best, "los"))

    scatterers = []
    kept = []
    flat_tol = max(2e-9, 1.0 / (f0 * P * cfg.delay_oversample))
    for est in paths:
        alpha = direction_cosine(est.direction(), prior_user)
        try:
            r = solve_range(est.delay_s, alpha, prior_user.range_m, flat_tol_s=flat_tol)
        except NonIdentifiableError:
            dropped.append((est, "non_identifiable"))
            continue
        except NoRootError:
            dropped.append((est, "no_root"))
            continue
        est.range_m = r
        kept.append(est)
        scatterers.append(SphericalPosition(est.azimuth, est.elevation, r))
    return CoarseResult(scatterers=scatterers, paths=kept, dropped=dropped)
