"""Prior-side estimator of the turbo loop: exact sum-product on the
three-layer joint-sparsity factor graph.

Per grid point q the graph is a star: a shared support bit couples the
per-user support bits through conditional-probability factors, and each
per-user bit gates a Bernoulli-Gaussian coefficient observed through the
virtual AWGN channel formed by the incoming extrinsic message.  The LOS
coefficient of each user hangs off its own Bernoulli switch.  All Bernoulli
bookkeeping is done in log-odds and all Gaussian ratios as log-density
differences, so the module stays exact at high SNR.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lmmse import VAR_MAX, VAR_MIN, GaussianBelief, extrinsic


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def _logit(p):
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class SparsityPrior:
    """Three-layer joint sparsity prior.

    support_prob: prior activity of each shared-support bit (scalar or (Q,)).
    cond_prob:    per-user P(user bit = 1 | shared bit = 1), shape (K,).
    los_prob:     per-user LOS-presence probability, shape (K,).
    nlos_std:     gain std of active NLOS coefficients (scalar or (K, Q)).
    los_std:      gain std of active LOS coefficients (scalar or (K,)).
    coupling:     optional (K, Q) mask; False detaches user k from point q
                  (treated as an always-inactive coefficient).
    """

    num_users: int
    num_grid: int
    support_prob: np.ndarray = 0.5
    cond_prob: np.ndarray = 1.0
    los_prob: np.ndarray = 0.9
    nlos_std: np.ndarray = 1.0
    los_std: np.ndarray = 1.0
    coupling: np.ndarray | None = None

    def __post_init__(self):
        k, q = self.num_users, self.num_grid
        object.__setattr__(self, "support_prob", np.broadcast_to(np.asarray(self.support_prob, float), (q,)).copy())
        object.__setattr__(self, "cond_prob", np.broadcast_to(np.asarray(self.cond_prob, float), (k,)).copy())
        object.__setattr__(self, "los_prob", np.broadcast_to(np.asarray(self.los_prob, float), (k,)).copy())
        object.__setattr__(self, "nlos_std", np.broadcast_to(np.asarray(self.nlos_std, float), (k, q)).copy())
        object.__setattr__(self, "los_std", np.broadcast_to(np.asarray(self.los_std, float), (k,)).copy())
        for name in ("support_prob", "cond_prob", "los_prob"):
            v = getattr(self, name)
            if np.any((v < 0) | (v > 1)):
                raise ValueError(f"{name} must lie in [0, 1]")
        if np.any(self.nlos_std <= 0) or np.any(self.los_std <= 0):
            raise ValueError("gain stds must be positive")
        if self.coupling is not None:
            object.__setattr__(self, "coupling", np.asarray(self.coupling, bool).reshape(k, q))

    def marginal_prior_var(self) -> np.ndarray:
        """Prior E|x|^2 per coefficient, shape (K, Q+1); column 0 is LOS."""
        out = np.empty((self.num_users, self.num_grid + 1))
        out[:, 0] = self.los_prob * self.los_std**2
        act = self.support_prob[None, :] * self.cond_prob[:, None]
        if self.coupling is not None:
            act = act * self.coupling
        out[:, 1:] = act * self.nlos_std**2
        return out


@dataclass
class ModuleBResult:
    mean: np.ndarray  # (K, Q+1) posterior means, column 0 = LOS
    var: np.ndarray  # (K, Q+1) posterior variances
    support_nlos: np.ndarray  # (K, Q) P(user support bit = 1 | obs)
    support_los: np.ndarray  # (K,)
    support_joint: np.ndarray  # (Q,) posterior of the shared support bit
    ext: GaussianBelief  # extrinsic message back to the linear module
    pi_in: np.ndarray = field(default=None)  # (K, Q) likelihood-side activity
    pi_q_in: np.ndarray = field(default=None)  # (Q,) combined upward message
    pi_out: np.ndarray = field(default=None)  # (K, Q) prior-side activity


def _gauss_llr(mean, var, sigma2):
    """log CN(0; m, v + s2) - log CN(0; m, v): evidence for an active gain."""
    tot = var + sigma2
    return np.log(var) - np.log(tot) + np.abs(mean) ** 2 * sigma2 / (var * tot)


def _bg_moments(active_logit, pri_mean, pri_var, sigma2):
    """Posterior moments of a Bernoulli-Gaussian coefficient under a Gaussian
    virtual observation; active_logit is the posterior log-odds of activity."""
    p_act = 1.0 / (1.0 + np.exp(-active_logit))
    v_c = pri_var * sigma2 / (pri_var + sigma2)
    m_c = pri_mean * sigma2 / (pri_var + sigma2)
    mean = p_act * m_c
    var = p_act * (v_c + np.abs(m_c) ** 2) - np.abs(mean) ** 2
    return mean, np.maximum(var, VAR_MIN), p_act


def module_b(pri: GaussianBelief, prior: SparsityPrior, var_min=VAR_MIN, var_max=VAR_MAX) -> ModuleBResult:
    """One exact message-passing pass over the prior factor graph.

    ``pri`` carries the virtual AWGN observations, shape (K, Q+1) with the
    LOS coefficient in column 0.
    """
    K, D = pri.mean.shape
    Q = D - 1
    if (K, Q) != (prior.num_users, prior.num_grid):
        raise ValueError("prior size mismatch")
    x_n = pri.mean[:, 1:]
    v_n = pri.var[:, 1:]
    s2_n = prior.nlos_std**2

    # upward sweep: coefficient evidence -> per-user bit -> shared bit
    llr_in = _gauss_llr(x_n, v_n, s2_n)  # (K, Q) logit of pi^in
    log_pi_in = _log_sigmoid(llr_in)
    log_1m_pi_in = _log_sigmoid(-llr_in)
    with np.errstate(divide="ignore"):
        log_rho = np.log(prior.cond_prob)[:, None]
        log_1m_rho = np.log1p(-prior.cond_prob)[:, None]
    # message eta_q^k -> s_q in log-odds: ln[rho*pi + (1-rho)(1-pi)] - ln(1-pi)
    lam = np.logaddexp(log_rho + log_pi_in, log_1m_rho + log_1m_pi_in) - log_1m_pi_in
    if prior.coupling is not None:
        lam = np.where(prior.coupling, lam, 0.0)
        llr_in = np.where(prior.coupling, llr_in, -np.inf)
    lam_sum = lam.sum(axis=0)  # (Q,)

    # downward sweep: shared-bit prior plus the other users' evidence
    prior_logit = _logit(prior.support_prob)  # (Q,)
    out_logit = prior_logit[None, :] + lam_sum[None, :] - lam  # (K, Q)
    log_pi_out = log_rho + _log_sigmoid(out_logit)
    log_1m_pi_out = np.logaddexp(_log_sigmoid(-out_logit), log_1m_rho + _log_sigmoid(out_logit))

    post_logit = llr_in + log_pi_out - log_1m_pi_out
    mean_n, var_n, support_nlos = _bg_moments(post_logit, x_n, v_n, s2_n)

    # LOS branch: a private Bernoulli switch per user
    x_l = pri.mean[:, 0]
    v_l = pri.var[:, 0]
    s2_l = prior.los_std**2
    llr_los = _gauss_llr(x_l, v_l, s2_l)
    post_logit_los = llr_los + _logit(prior.los_prob)
    mean_l, var_l, support_los = _bg_moments(post_logit_los, x_l, v_l, s2_l)

    mean = np.concatenate([mean_l[:, None], mean_n], axis=1)
    var = np.concatenate([var_l[:, None], var_n], axis=1)
    post = GaussianBelief(mean, var)
    ext = extrinsic(post, pri, var_min=var_min, var_max=var_max)
    return ModuleBResult(
        mean=mean,
        var=var,
        support_nlos=support_nlos,
        support_los=support_los,
        support_joint=1.0 / (1.0 + np.exp(-(prior_logit + lam_sum))),
        ext=ext,
        pi_in=1.0 / (1.0 + np.exp(-llr_in)),
        pi_q_in=1.0 / (1.0 + np.exp(-lam_sum)),
        pi_out=np.exp(log_pi_out),
    )
