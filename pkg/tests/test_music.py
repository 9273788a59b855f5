import numpy as np
import pytest

from chanloc.config import MusicConfig
from chanloc.geometry import (
    C_LIGHT,
    ArrayGeometry,
    SphericalPosition,
    direction_cosine,
    path_delay,
    steering_vector,
)
from chanloc.music import (
    NoRootError,
    NonIdentifiableError,
    RankDeficiencyError,
    coarse_scatterers,
    estimate_angles_delays,
    mdl_order,
    solve_range,
)

GEOM8 = ArrayGeometry(8, 8)
F0 = 30e3
CFG = MusicConfig(
    az_range_deg=(0.0, 90.0), el_range_deg=(30.0, 89.0),
    az_step_deg=2.0, el_step_deg=2.0, delay_oversample=16,
)


def synthesize(geom, paths, pilots, f0, noise_std=0.0, rng=None):
    """Forward model oracle: Y[:, p-1] = sum_l x_l a_l u_p exp(-j2pi p f0 tau_l)."""
    P = len(pilots)
    Y = np.zeros((geom.n_antennas, P), dtype=complex)
    for az, el, tau, gain in paths:
        a = steering_vector(az, el, geom)
        for p in range(1, P + 1):
            Y[:, p - 1] += gain * a * pilots[p - 1] * np.exp(-2j * np.pi * p * f0 * tau)
    if noise_std > 0:
        Y += noise_std / np.sqrt(2) * (
            rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape)
        )
    return Y


def delay_cell(cfg, P, f0):
    return 1.0 / (f0 * P * cfg.delay_oversample)


def test_single_aligned_path_recovered_exactly():
    P = 32
    pilots = np.exp(1j * np.linspace(0.3, 2.0, P))
    az, el = np.deg2rad(30.0), np.deg2rad(80.0)  # on the 2-degree search grid
    tau = 40 * delay_cell(CFG, P, F0)  # on the delay grid
    Y = synthesize(GEOM8, [(az, el, tau, 1.0)], pilots, F0)
    est = estimate_angles_delays(Y, pilots, GEOM8, F0, CFG)
    assert len(est) == 1
    assert abs(est[0].azimuth - az) <= np.deg2rad(2.0) + 1e-9
    assert abs(est[0].elevation - el) <= np.deg2rad(2.0) + 1e-9
    assert abs(est[0].delay_s - tau) <= delay_cell(CFG, P, F0)


def test_zero_observation_returns_empty():
    pilots = np.ones(16)
    Y = np.zeros((GEOM8.n_antennas, 16), dtype=complex)
    assert estimate_angles_delays(Y, pilots, GEOM8, F0, CFG) == []


def test_requested_order_too_large_raises():
    pilots = np.ones(4)
    Y = np.ones((4, 4), dtype=complex)
    cfg = MusicConfig(model_order=4)
    with pytest.raises(RankDeficiencyError):
        estimate_angles_delays(Y, pilots, ArrayGeometry(2, 2), F0, cfg)


def test_two_separated_paths_recovered_at_20db():
    P = 32
    hits = 0
    trials = 100
    cell = delay_cell(CFG, P, F0)
    truths = [
        (np.deg2rad(20.0), np.deg2rad(70.0), 30 * cell),
        (np.deg2rad(64.0), np.deg2rad(52.0), 30 * cell + 3.0 / (F0 * P)),
    ]
    for t in range(trials):
        rng = np.random.default_rng([17, t])
        pilots = np.exp(0.5j * np.pi * rng.integers(0, 4, P))
        paths = [
            (az, el, tau, np.exp(1j * rng.uniform(0, 2 * np.pi))) for az, el, tau in truths
        ]
        Y = synthesize(GEOM8, paths, pilots, F0, noise_std=10 ** (-20 / 20) * np.sqrt(2), rng=rng)
        est = estimate_angles_delays(Y, pilots, GEOM8, F0, CFG)
        ok = 0
        for az, el, tau in truths:
            for e in est:
                if (
                    abs(e.azimuth - az) <= np.deg2rad(2.0) + 1e-9
                    and abs(e.elevation - el) <= np.deg2rad(2.0) + 1e-9
                    and abs(e.delay_s - tau) <= cell
                ):
                    ok += 1
                    break
        hits += ok == 2
    assert hits >= 95


def test_mdl_counts_sources():
    rng = np.random.default_rng(0)
    n, snaps = 8, 200
    sources = rng.standard_normal((3, snaps)) + 1j * rng.standard_normal((3, snaps))
    mix = rng.standard_normal((n, 3)) + 1j * rng.standard_normal((n, 3))
    data = mix @ sources + 0.05 * (rng.standard_normal((n, snaps)) + 1j * rng.standard_normal((n, snaps)))
    cov = data @ data.conj().T / snaps
    eig = np.linalg.eigvalsh(cov)[::-1]
    assert mdl_order(eig, snaps, n - 1) == 3


def test_solve_range_forward_inverse_example():
    # tau generated from r=50, r_ue=100, alpha=0
    tau = (np.sqrt(100.0**2 + 50.0**2) + 50.0) / C_LIGHT
    assert solve_range(tau, 0.0, 100.0) == pytest.approx(50.0, abs=1e-6)


def test_solve_range_right_inverse_property():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        r_ue = rng.uniform(20, 400)
        r = rng.uniform(1, 400)
        alpha = rng.uniform(-1, 0.99)
        tau = (np.sqrt(r_ue**2 + r**2 - 2 * r_ue * r * alpha) + r) / C_LIGHT
        assert solve_range(tau, alpha, r_ue) == pytest.approx(r, abs=1e-6)


def test_solve_range_on_axis_degenerate_flagged():
    with pytest.raises(NonIdentifiableError):
        solve_range(100.0 / C_LIGHT, 1.0, 100.0)


def test_solve_range_below_floor_raises():
    # 1-D scan oracle: the minimum achievable delay over r >= 0 is r_ue / c
    r_ue, alpha = 150.0, 0.4
    scan = [
        (np.sqrt(r_ue**2 + r**2 - 2 * r_ue * r * alpha) + r) / C_LIGHT
        for r in np.linspace(0, 1000, 20001)
    ]
    assert min(scan) == pytest.approx(r_ue / C_LIGHT, rel=1e-12)
    with pytest.raises(NoRootError):
        solve_range(0.9 * r_ue / C_LIGHT, alpha, r_ue)


def test_solve_range_residual_tolerance():
    tau = (np.sqrt(120.0**2 + 80.0**2 - 2 * 120 * 80 * 0.3) + 80.0) / C_LIGHT
    r = solve_range(tau, 0.3, 120.0)
    resid = (np.sqrt(120.0**2 + r**2 - 2 * 120 * r * 0.3) + r) / C_LIGHT - tau
    assert abs(resid) < 1e-12


def test_coarse_los_only_scene_yields_no_scatterers():
    P = 32
    pilots = np.exp(1j * np.linspace(0, 3, P))
    user = SphericalPosition(np.deg2rad(40.0), np.deg2rad(80.0), 180.0)
    Y = synthesize(GEOM8, [(user.azimuth, user.elevation, user.range_m / C_LIGHT, 1.0)], pilots, F0)
    res = coarse_scatterers(Y, user, pilots, GEOM8, F0, CFG)
    assert res.scatterers == []
    assert any(reason == "los" for _, reason in res.dropped)


def test_coarse_recovers_three_scatterers_at_20db():
    P = 32
    user = SphericalPosition(np.deg2rad(45.0), np.deg2rad(85.0), 200.0)
    scats = [
        SphericalPosition(np.deg2rad(14.0), np.deg2rad(72.0), 120.0),
        SphericalPosition(np.deg2rad(46.0), np.deg2rad(58.0), 80.0),
        SphericalPosition(np.deg2rad(78.0), np.deg2rad(88.0), 160.0),
    ]
    rng = np.random.default_rng(23)
    pilots = np.exp(0.5j * np.pi * rng.integers(0, 4, P))
    paths = [(user.azimuth, user.elevation, user.range_m / C_LIGHT, 0.9)]
    paths += [(s.azimuth, s.elevation, path_delay(user, s), 1.0) for s in scats]
    Y = synthesize(GEOM8, paths, pilots, F0, noise_std=0.1 * np.sqrt(2), rng=rng)
    res = coarse_scatterers(Y, user, pilots, GEOM8, F0, CFG)
    assert len(res.scatterers) == 3
    for s in scats:
        errs = [np.linalg.norm(e.to_cartesian() - s.to_cartesian()) for e in res.scatterers]
        assert min(errs) < 12.0  # combined angle-cell / delay-cell tolerance


def test_coarse_estimates_reproduce_measured_delay():
    P = 32
    user = SphericalPosition(np.deg2rad(45.0), np.deg2rad(85.0), 200.0)
    scat = SphericalPosition(np.deg2rad(15.0), np.deg2rad(75.0), 110.0)
    pilots = np.exp(1j * np.linspace(0, 1, P))
    Y = synthesize(GEOM8, [(scat.azimuth, scat.elevation, path_delay(user, scat), 1.0)], pilots, F0)
    res = coarse_scatterers(Y, user, pilots, GEOM8, F0, CFG, exclude_los=False)
    assert len(res.paths) == 1
    est = res.paths[0]
    recon = path_delay(user, SphericalPosition(est.azimuth, est.elevation, est.range_m))
    assert recon == pytest.approx(est.delay_s, abs=1e-11)


def test_coarse_on_axis_scatterer_dropped_as_non_identifiable():
    P = 32
    user = SphericalPosition(np.deg2rad(44.0), np.deg2rad(84.0), 200.0)
    # scatterer on the BS-user segment: bounce delay equals the direct delay
    scat = SphericalPosition(user.azimuth, user.elevation, 80.0)
    pilots = np.exp(1j * np.linspace(0, 1, P))
    Y = synthesize(GEOM8, [(scat.azimuth, scat.elevation, path_delay(user, scat), 1.0)], pilots, F0)
    res = coarse_scatterers(Y, user, pilots, GEOM8, F0, CFG, exclude_los=False)
    assert res.scatterers == []
    assert any(reason == "non_identifiable" for _, reason in res.dropped)


def test_estimate_count_never_exceeds_model_order_cap():
    P = 16
    rng = np.random.default_rng(3)
    pilots = np.exp(1j * rng.uniform(0, 2 * np.pi, P))
    paths = [
        (np.deg2rad(20.0), np.deg2rad(70.0), 1e-7, 1.0),
        (np.deg2rad(60.0), np.deg2rad(50.0), 3e-7, 1.0),
    ]
    Y = synthesize(GEOM8, paths, pilots, F0, noise_std=0.05, rng=rng)
    cfg = MusicConfig(
        az_range_deg=(0.0, 90.0), el_range_deg=(30.0, 89.0), max_paths=1, delay_oversample=16,
    )
    est = estimate_angles_delays(Y, pilots, GEOM8, F0, cfg)
    assert len(est) <= 1
