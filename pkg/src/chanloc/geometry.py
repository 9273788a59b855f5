"""Coordinate frames, UPA array response, and propagation delays.

Conventions used throughout the package:

* The base station sits at the origin of a right-handed Cartesian frame.
* ``elevation`` is the polar angle measured from the +z axis (0 = boresight,
  pi/2 = horizon plane), ``azimuth`` rotates +x toward +y and lives in
  [0, 2*pi).  A direction unit vector is therefore
  ``(sin el * cos az, sin el * sin az, cos el)``.
* UPA elements are indexed row-major as (m, n) with m in [0, nx) along x and
  n in [0, ny) along y; the flat index is ``m * ny + n`` and the phase
  reference is element (0, 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

C_LIGHT = 299_792_458.0  # m/s

TWO_PI = 2.0 * np.pi


def spherical_to_cartesian(azimuth, elevation, range_m):
    """Convert spherical coordinates (possibly arrays) to xyz."""
    azimuth = np.asarray(azimuth, dtype=float)
    elevation = np.asarray(elevation, dtype=float)
    range_m = np.asarray(range_m, dtype=float)
    se = np.sin(elevation)
    return np.stack(
        [
            range_m * se * np.cos(azimuth),
            range_m * se * np.sin(azimuth),
            range_m * np.cos(elevation),
        ],
        axis=-1,
    )


def cartesian_to_spherical(xyz):
    """Convert xyz (last axis of length 3) to (azimuth, elevation, range)."""
    xyz = np.asarray(xyz, dtype=float)
    r = np.linalg.norm(xyz, axis=-1)
    safe_r = np.where(r > 0, r, 1.0)
    elevation = np.arccos(np.clip(xyz[..., 2] / safe_r, -1.0, 1.0))
    azimuth = np.mod(np.arctan2(xyz[..., 1], xyz[..., 0]), TWO_PI)
    azimuth = np.where(r > 0, azimuth, 0.0)
    elevation = np.where(r > 0, elevation, 0.0)
    return azimuth, elevation, r


@dataclass(frozen=True)
class SphericalPosition:
    """A point in the BS-centred spherical frame."""

    azimuth: float
    elevation: float
    range_m: float

    def __post_init__(self):
        if self.range_m < 0:
            raise ValueError(f"range must be >= 0, got {self.range_m}")

    def to_cartesian(self) -> np.ndarray:
        return spherical_to_cartesian(self.azimuth, self.elevation, self.range_m)

    @classmethod
    def from_cartesian(cls, xyz) -> "SphericalPosition":
        az, el, r = cartesian_to_spherical(np.asarray(xyz, dtype=float))
        return cls(float(az), float(el), float(r))


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array: nx-by-ny elements, spacing in wavelengths."""

    nx: int
    ny: int
    spacing: float = 0.5
    carrier_hz: float = 3.5e9

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("array dimensions must be positive")
        if self.spacing <= 0:
            raise ValueError("element spacing must be positive")
        if self.carrier_hz <= 0:
            raise ValueError("carrier frequency must be positive")

    @property
    def n_antennas(self) -> int:
        return self.nx * self.ny

    def element_indices(self) -> np.ndarray:
        """(N, 2) array of (m, n) element indices, row-major."""
        return _element_indices(self.nx, self.ny)


@lru_cache(maxsize=64)
def _element_indices(nx, ny) -> np.ndarray:
    m, n = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    out = np.stack([m.ravel(), n.ravel()], axis=-1)
    out.setflags(write=False)
    return out


def steering_vector(azimuth, elevation, geom: ArrayGeometry) -> np.ndarray:
    """UPA array response; unit-modulus entries, phase 0 at element (0, 0).

    Element (m, n) has phase
    ``2*pi*spacing*(m*sin(el)*cos(az) + n*sin(el)*sin(az))``.
    """
    ux = np.sin(elevation) * np.cos(azimuth)
    uy = np.sin(elevation) * np.sin(azimuth)
    return _steering_from_cosines(ux, uy, geom)


def steering_from_cartesian(xyz, geom: ArrayGeometry) -> np.ndarray:
    """Array response toward the direction of a Cartesian point."""
    xyz = np.asarray(xyz, dtype=float)
    r = np.linalg.norm(xyz)
    if r == 0:
        raise ValueError("steering direction undefined for the origin")
    return _steering_from_cosines(xyz[0] / r, xyz[1] / r, geom)


def _steering_from_cosines(ux, uy, geom: ArrayGeometry) -> np.ndarray:
    mn = geom.element_indices()
    phase = TWO_PI * geom.spacing * (mn[:, 0] * ux + mn[:, 1] * uy)
    return np.exp(1j * phase)


def steering_cosine_weights(geom: ArrayGeometry):
    """Per-element weights (2*pi*spacing*m, 2*pi*spacing*n) used by the
    steering phase; shared by the dictionary gradient code."""
    mn = geom.element_indices()
    return TWO_PI * geom.spacing * mn[:, 0], TWO_PI * geom.spacing * mn[:, 1]


def unit_xy_jacobian(xyz):
    """Jacobian of the direction cosines (x/r, y/r) w.r.t. xyz; shape (2, 3)."""
    xyz = np.asarray(xyz, dtype=float)
    r = np.linalg.norm(xyz)
    jac = np.empty((2, 3))
    jac[0] = -xyz[0] * xyz / r**3
    jac[0, 0] += 1.0 / r
    jac[1] = -xyz[1] * xyz / r**3
    jac[1, 1] += 1.0 / r
    return jac


def path_delay(user: SphericalPosition, scatterer: SphericalPosition) -> float:
    """Two-leg bounce delay user -> scatterer -> BS, in seconds."""
    return path_delay_xyz(user.to_cartesian(), scatterer.to_cartesian())


def path_delay_xyz(user_xyz, scatterer_xyz):
    """Bounce delay from Cartesian positions; broadcasts over leading axes."""
    user_xyz = np.asarray(user_xyz, dtype=float)
    scatterer_xyz = np.asarray(scatterer_xyz, dtype=float)
    leg1 = np.linalg.norm(user_xyz - scatterer_xyz, axis=-1)
    leg2 = np.linalg.norm(scatterer_xyz, axis=-1)
    return (leg1 + leg2) / C_LIGHT


def los_delay(user: SphericalPosition) -> float:
    return user.range_m / C_LIGHT


def direction_cosine(a: SphericalPosition, b: SphericalPosition) -> float:
    """Cosine of the angle between the BS-frame directions of two points."""
    return float(
        np.sin(a.elevation) * np.sin(b.elevation) * np.cos(a.azimuth - b.azimuth)
        + np.cos(a.elevation) * np.cos(b.elevation)
    )
