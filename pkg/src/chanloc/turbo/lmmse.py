"""Linear-observation side of the turbo loop: LMMSE posterior and the
Gaussian extrinsic quotient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

VAR_MIN = 1e-12
VAR_MAX = 1e12


class SingularModelError(np.linalg.LinAlgError):
    """Regularized normal matrix was not numerically invertible."""


@dataclass
class GaussianBelief:
    """Diagonal complex Gaussian: elementwise mean and variance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=complex)
        self.var = np.asarray(self.var, dtype=float)
        if self.mean.shape != self.var.shape:
            raise ValueError("mean/var shape mismatch")
        if np.any(self.var <= 0):
            raise ValueError("variances must be positive")

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.var.copy())


def lmmse_a(y, phi, prior: GaussianBelief, noise_var):
    """Gaussian posterior for y = phi x + z, z ~ CN(0, noise_var I),
    x ~ CN(prior.mean, diag(prior.var)).

    Returns a GaussianBelief carrying the posterior mean and the diagonal of
    the posterior covariance:

        V_post = (phi^H phi / s2 + diag(1/v_pri))^{-1}
        x_post = V_post (x_pri / v_pri + phi^H y / s2)

    ``noise_var`` may be a scalar or a per-observation vector.
    """
    y = np.asarray(y, dtype=complex)
    phi = np.asarray(phi, dtype=complex)
    if phi.shape[0] != y.shape[0] or phi.shape[1] != prior.mean.shape[0]:
        raise ValueError("dimension mismatch between y, phi and prior")
    s2 = np.broadcast_to(np.asarray(noise_var, dtype=float), y.shape)
    if np.any(s2 <= 0):
        raise ValueError("noise variance must be positive")
    phi_w = phi / s2[:, None]
    normal = phi.conj().T @ phi_w
    normal[np.diag_indices_from(normal)] += 1.0 / prior.var
    rhs = prior.mean / prior.var + phi_w.conj().T @ y
    try:
        cho = scipy.linalg.cho_factor(normal, check_finite=False)
        x_post = scipy.linalg.cho_solve(cho, rhs, check_finite=False)
        cov = scipy.linalg.cho_solve(cho, np.eye(normal.shape[0], dtype=complex), check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SingularModelError(str(exc)) from exc
    v_post = np.maximum(np.real(np.diag(cov)), VAR_MIN)
    return GaussianBelief(x_post, v_post)


def extrinsic(post: GaussianBelief, pri: GaussianBelief, var_min=VAR_MIN, var_max=VAR_MAX):
    """Gaussian quotient post / pri, elementwise on diagonals.

    Where no information was gained (v_post >= v_pri) the message degrades to
    an uninformative one: variance var_max, mean equal to the posterior mean.
    """
    gained = post.var < pri.var
    v_ext = np.full_like(post.var, var_max)
    np.divide(1.0, post.var, out=v_ext, where=gained)
    v_ext[gained] -= 1.0 / pri.var[gained]
    with np.errstate(divide="ignore"):
        v_ext[gained] = 1.0 / v_ext[gained]
    v_ext = np.clip(v_ext, var_min, var_max)
    x_ext = post.mean.copy()
    x_ext[gained] = v_ext[gained] * (
        post.mean[gained] / post.var[gained] - pri.mean[gained] / pri.var[gained]
    )
    return GaussianBelief(x_ext, v_ext)


def gaussian_product(a: GaussianBelief, b: GaussianBelief) -> GaussianBelief:
    """Normalized product of two diagonal Gaussians (test/bookkeeping helper)."""
    v = 1.0 / (1.0 / a.var + 1.0 / b.var)
    m = v * (a.mean / a.var + b.mean / b.var)
    return GaussianBelief(m, v)
