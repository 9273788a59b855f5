"""Reference estimators: subspace + least squares, and the oracle LMMSE bound."""

from __future__ import annotations

import numpy as np

from .dictionary import Grid, assemble_user_matrix
from .geometry import steering_vector
from .scene import Scenario
from .turbo import GaussianBelief, lmmse_a


def _angle_delay_matrix(paths, pilots, geom, f0):
    """(N*P, n_paths) dictionary parameterized directly by (angle, delay)."""
    P = len(pilots)
    N = geom.n_antennas
    cols = []
    for est in paths:
        a = steering_vector(est.azimuth, est.elevation, geom)
        phase = np.exp(-2j * np.pi * np.arange(1, P + 1) * f0 * est.delay_s)
        cols.append(((pilots * phase)[:, None] * a[None, :]).reshape(-1))
    return np.stack(cols, axis=1) if cols else np.zeros((N * P, 0), dtype=complex)


def _dedup_columns(phi, threshold=0.999):
    """Drop later columns nearly collinear with earlier ones."""
    keep = []
    for j in range(phi.shape[1]):
        col = phi[:, j]
        duplicate = any(
            abs(col.conj() @ phi[:, i]) / (np.linalg.norm(col) * np.linalg.norm(phi[:, i]))
            > threshold
            for i in keep
        )
        if not duplicate:
            keep.append(j)
    return phi[:, keep], keep


def estimate_ls(y, paths, pilots, geom, f0):
    """Least-squares gains on the estimated angle-delay signatures.

    Returns the (N, P) channel estimate; zero paths give the zero channel.
    """
    P = len(pilots)
    N = geom.n_antennas
    if not paths:
        return np.zeros((N, P), dtype=complex)
    phi = _angle_delay_matrix(paths, pilots, geom, f0)
    phi, keep = _dedup_columns(phi)
    gains, *_ = np.linalg.lstsq(phi, y, rcond=None)
    clean = _angle_delay_matrix([paths[i] for i in keep], np.ones(P), geom, f0)
    return (clean @ gains).reshape(P, N).T


def genie_lmmse(y, scn: Scenario, k: int, pilots_k, noise_var):
    """Oracle LMMSE: dictionary restricted to the true path signatures with
    the true gain statistics and noise variance.

    Returns (channel estimate (N, P), coefficient posterior GaussianBelief).
    """
    user = scn.users[k].true_pos
    true_grid = Grid.from_spherical(scn.user_scatterers(k))
    phi = assemble_user_matrix(
        true_grid, user.to_cartesian(), pilots_k, scn.array, scn.subcarrier_spacing_hz
    )
    active = [scn.los_gains[k] != 0] + [True] * len(true_grid)
    phi = phi[:, np.nonzero(active)[0]]
    prior = GaussianBelief(
        np.zeros(phi.shape[1], dtype=complex), np.ones(phi.shape[1])
    )
    post = lmmse_a(y, phi, prior, noise_var)
    clean = assemble_user_matrix(
        true_grid, user.to_cartesian(), np.ones(scn.subcarriers), scn.array,
        scn.subcarrier_spacing_hz,
    )[:, np.nonzero(active)[0]]
    h_hat = (clean @ post.mean).reshape(scn.subcarriers, scn.array.n_antennas).T
    return h_hat, post
