"""Location-domain sparse dictionaries and the grouped stacked sensing matrix.

A user's sensing matrix has one LOS column (steering toward the user, direct
delay) followed by Q NLOS columns, one per candidate scatterer grid point:

    column_q row-block p = u_{k,p} * exp(-j 2 pi p f0 tau(grid_q, user)) * a(grid_q)

All entries are unit modulus times the pilot symbol.  Grid points and user
positions are handled in BS-frame Cartesian coordinates so the M-step can
differentiate columns without polar singularities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    C_LIGHT,
    ArrayGeometry,
    SphericalPosition,
    cartesian_to_spherical,
    steering_cosine_weights,
    unit_xy_jacobian,
)


@dataclass
class Grid:
    """Candidate scatterer positions, Cartesian (Q, 3); mutable between
    refinement steps, never during one."""

    points_xyz: np.ndarray

    def __post_init__(self):
        self.points_xyz = np.atleast_2d(np.asarray(self.points_xyz, dtype=float))
        if self.points_xyz.size == 0:
            self.points_xyz = np.zeros((0, 3))
        elif self.points_xyz.shape[1] != 3:
            raise ValueError("grid points must be (Q, 3) Cartesian")

    @classmethod
    def from_spherical(cls, points) -> "Grid":
        if len(points) == 0:
            return cls(np.zeros((0, 3)))
        return cls(np.array([p.to_cartesian() for p in points]))

    def to_spherical(self) -> list:
        return [SphericalPosition.from_cartesian(p) for p in self.points_xyz]

    def __len__(self):
        return self.points_xyz.shape[0]


def _bounce_delays(grid_xyz, user_xyz):
    leg1 = np.linalg.norm(user_xyz[None, :] - grid_xyz, axis=1)
    leg2 = np.linalg.norm(grid_xyz, axis=1)
    return (leg1 + leg2) / C_LIGHT


def _steering_columns(grid_xyz, geom: ArrayGeometry):
    """(N, Q) steering matrix from Cartesian points via direction cosines."""
    r = np.linalg.norm(grid_xyz, axis=1)
    wx, wy = steering_cosine_weights(geom)
    phase = wx[:, None] * (grid_xyz[:, 0] / r)[None, :] + wy[:, None] * (grid_xyz[:, 1] / r)[None, :]
    return np.exp(1j * phase)


def build_steering_dictionary(grid: Grid, geom: ArrayGeometry) -> np.ndarray:
    """(N, Q) matrix whose column q is the array response toward grid point q."""
    if len(grid) == 0:
        return np.zeros((geom.n_antennas, 0), dtype=complex)
    return _steering_columns(grid.points_xyz, geom)


def build_delay_vector(grid: Grid, user_xyz, p: int, f0: float) -> np.ndarray:
    """(Q,) bounce-delay phases exp(-j 2 pi p f0 tau(grid_q, user))."""
    if p < 1:
        raise ValueError("subcarrier index is 1-based")
    if len(grid) == 0:
        return np.zeros(0, dtype=complex)
    taus = _bounce_delays(grid.points_xyz, np.asarray(user_xyz, dtype=float))
    return np.exp(-2j * np.pi * p * f0 * taus)


def assemble_user_matrix(grid: Grid, user_xyz, pilots, geom: ArrayGeometry, f0: float) -> np.ndarray:
    """Per-user sensing matrix, shape (N*P, Q+1); column 0 is the LOS column."""
    user_xyz = np.asarray(user_xyz, dtype=float)
    pilots = np.asarray(pilots)
    P = pilots.shape[0]
    N = geom.n_antennas
    Q = len(grid)
    A = build_steering_dictionary(grid, geom)  # (N, Q)
    a_los = _steering_columns(user_xyz[None, :], geom)[:, 0]
    tau0 = np.linalg.norm(user_xyz) / C_LIGHT
    taus = _bounce_delays(grid.points_xyz, user_xyz) if Q else np.zeros(0)

    out = np.empty((N * P, Q + 1), dtype=complex)
    p_idx = np.arange(1, P + 1)
    los_phase = np.exp(-2j * np.pi * p_idx * f0 * tau0)  # (P,)
    out[:, 0] = (pilots * los_phase)[:, None].repeat(N, axis=1).reshape(-1) * np.tile(a_los, P)
    if Q:
        nlos_phase = np.exp(-2j * np.pi * f0 * np.outer(p_idx, taus))  # (P, Q)
        blocks = A[None, :, :] * (pilots[:, None] * nlos_phase)[:, None, :]  # (P, N, Q)
        out[:, 1:] = blocks.reshape(N * P, Q)
    return out


@dataclass
class SensingMatrices:
    """Per-user matrices plus the grouped stacked view.

    The stacked coefficient vector is user-major: user k owns columns
    [k*(Q+1), (k+1)*(Q+1)); row-block g covers observations of group g.
    """

    per_user: list  # K arrays of shape (N*P, Q+1)
    groups: list  # list of member-index lists, group id order
    num_grid: int = field(init=False)

    def __post_init__(self):
        if any(len(m) == 0 for m in self.groups):
            raise ValueError("empty group in grouping")
        self.num_grid = self.per_user[0].shape[1] - 1

    @property
    def num_users(self):
        return len(self.per_user)

    def phi_0(self, k) -> np.ndarray:
        return self.per_user[k][:, :1]

    def phi_q(self, k) -> np.ndarray:
        return self.per_user[k][:, 1:]

    def group_matrix(self, g) -> np.ndarray:
        """Horizontal concatenation of member matrices of group g."""
        return np.concatenate([self.per_user[k] for k in self.groups[g]], axis=1)

    def dense(self) -> np.ndarray:
        """Full (G*N*P, K*(Q+1)) block matrix, zero off the group structure."""
        rows = self.per_user[0].shape[0]
        cols = self.num_grid + 1
        out = np.zeros((rows * len(self.groups), cols * self.num_users), dtype=complex)
        for g, members in enumerate(self.groups):
            for k in members:
                out[g * rows : (g + 1) * rows, k * cols : (k + 1) * cols] = self.per_user[k]
        return out

    def apply(self, x) -> np.ndarray:
        """Multiply the stacked matrix by a user-major coefficient vector."""
        cols = self.num_grid + 1
        rows = self.per_user[0].shape[0]
        out = np.zeros((len(self.groups), rows), dtype=complex)
        for g, members in enumerate(self.groups):
            for k in members:
                out[g] += self.per_user[k] @ x[k * cols : (k + 1) * cols]
        return out.reshape(-1)


def assemble_stacked(per_user, grouping) -> SensingMatrices:
    """Stack per-user matrices into the grouped block structure."""
    groups = grouping.groups() if hasattr(grouping, "groups") else list(grouping)
    return SensingMatrices(per_user=list(per_user), groups=[list(m) for m in groups])


def user_matrix_gradients(grid: Grid, user_xyz, pilots, geom: ArrayGeometry, f0: float,
                          active=None):
    """Columns and their derivatives w.r.t. grid and user Cartesian coords.

    Returns (phi, d_grid, d_user_nlos, d_user_los):
      phi          (N*P, Q+1) as assemble_user_matrix
      d_grid       (q, 3, N*P) derivative of NLOS column q w.r.t. grid_q coords
      d_user_nlos  (q, 3, N*P) derivative of NLOS column q w.r.t. user coords
      d_user_los   (3, N*P)    derivative of the LOS column w.r.t. user coords

    ``active`` selects the grid points to differentiate (default all); the
    derivative arrays then cover only those rows, in ``active`` order.

    Each derivative is column * j * (phase derivative); the steering phase of
    element (m, n) is w_m*x/r + w_n*y/r and the delay phase is
    -2 pi p f0 tau, so only the real-valued phase fields are differentiated.
    """
    user_xyz = np.asarray(user_xyz, dtype=float)
    pilots = np.asarray(pilots)
    P = pilots.shape[0]
    N = geom.n_antennas
    Q = len(grid)
    phi = assemble_user_matrix(grid, user_xyz, pilots, geom, f0)
    if active is None:
        active = np.arange(Q)
    else:
        active = np.asarray(active, dtype=int)

    wx, wy = steering_cosine_weights(geom)  # (N,)
    omega = 2.0 * np.pi * f0 * np.arange(1, P + 1, dtype=float)  # (P,)

    r_u = np.linalg.norm(user_xyz)
    jac_u = unit_xy_jacobian(user_xyz)  # (2, 3)
    steer_grad_u = wx[:, None] * jac_u[0][None, :] + wy[:, None] * jac_u[1][None, :]  # (N, 3)
    dtau0 = user_xyz / (C_LIGHT * r_u)  # (3,)
    dphase_los = steer_grad_u[None, :, :] - omega[:, None, None] * dtau0[None, None, :]
    d_user_los = (phi[:, 0].reshape(P, N)[:, :, None] * 1j * dphase_los).reshape(N * P, 3).T

    if len(active) == 0:
        empty = np.zeros((0, 3, N * P), dtype=complex)
        return phi, empty, empty.copy(), d_user_los

    g = grid.points_xyz[active]  # (q, 3)
    Q = len(active)
    r_g = np.linalg.norm(g, axis=1)  # (Q,)
    diff = g - user_xyz[None, :]  # (Q, 3)
    dist = np.linalg.norm(diff, axis=1)  # (Q,)
    # d(direction cosines)/d(point) for all grid points at once
    jac = np.empty((Q, 2, 3))
    jac[:, 0, :] = -g[:, 0, None] * g / r_g[:, None] ** 3
    jac[:, 0, 0] += 1.0 / r_g
    jac[:, 1, :] = -g[:, 1, None] * g / r_g[:, None] ** 3
    jac[:, 1, 1] += 1.0 / r_g
    steer_grad = (
        wx[None, :, None] * jac[:, None, 0, :] + wy[None, :, None] * jac[:, None, 1, :]
    )  # (Q, N, 3)
    dtau_dg = (diff / dist[:, None] + g / r_g[:, None]) / C_LIGHT  # (Q, 3)
    dtau_du = -diff / (dist[:, None] * C_LIGHT)  # (Q, 3)

    cols = phi[:, 1 + active].reshape(P, N, Q)  # subcarrier-major blocks
    jcols = 1j * np.moveaxis(cols, 2, 0)  # (Q, P, N)
    dphase_g = steer_grad[:, None, :, :] - omega[None, :, None, None] * dtau_dg[:, None, None, :]
    d_grid = (jcols[..., None] * dphase_g).reshape(Q, N * P, 3).transpose(0, 2, 1)
    dphase_u = -omega[None, :, None] * dtau_du[:, None, :]  # (Q, P, 3)
    d_user_nlos = (jcols[..., None] * dphase_u[:, :, None, :]).reshape(Q, N * P, 3).transpose(0, 2, 1)
    return phi, d_grid, d_user_nlos, d_user_los


def grid_in_region(points_xyz, region) -> np.ndarray:
    """Boolean mask of points inside the BS-frame region box."""
    points_xyz = np.atleast_2d(points_xyz)
    ok = np.ones(points_xyz.shape[0], dtype=bool)
    for axis, (lo, hi) in enumerate(region):
        ok &= (points_xyz[:, axis] >= lo) & (points_xyz[:, axis] <= hi)
    return ok


def clip_to_region(points_xyz, region) -> np.ndarray:
    points_xyz = np.atleast_2d(np.array(points_xyz, dtype=float, copy=True))
    for axis, (lo, hi) in enumerate(region):
        points_xyz[:, axis] = np.clip(points_xyz[:, axis], lo, hi)
    return points_xyz


def spherical_grid(points_xyz):
    """(az, el, r) arrays for reporting grids back in spherical terms."""
    return cartesian_to_spherical(np.atleast_2d(points_xyz))
