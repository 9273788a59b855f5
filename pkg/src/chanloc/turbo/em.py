"""Turbo E-step / EM M-step alternation for joint channel estimation and
grid / user-position refinement.

The E step alternates the per-group LMMSE estimator with the factor-graph
prior module, exchanging damped extrinsic messages.  The M step performs
safeguarded gradient ascent on the EM surrogate

    Q(zeta) = sum_g w_g ( -||y_g - Phi_g(zeta) x_post||^2
                          - sum_j v_post_j ||phi_j(zeta)||^2 ),   w_g = 1/s2_g

over grid-point and user Cartesian coordinates; steps are only accepted when
the surrogate does not decrease.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dictionary import Grid, assemble_user_matrix, clip_to_region, user_matrix_gradients
from ..config import TurboConfig
from .lmmse import GaussianBelief, extrinsic, lmmse_a
from .messages import ModuleBResult, SparsityPrior, module_b


@dataclass
class TurboProblem:
    """Everything the estimator needs besides its tuning config."""

    y_groups: np.ndarray  # (G, N*P)
    groups: list  # member user indices per group
    noise_var: np.ndarray  # (G,)
    pilots: np.ndarray  # (K, P) unit-modulus symbols actually transmitted
    geom: object
    f0: float
    grid_xyz: np.ndarray  # (Q, 3) initial grid, BS-frame Cartesian
    user_xyz: np.ndarray  # (K, 3) initial (prior) user positions
    prior: SparsityPrior
    region: tuple = ()  # BS-frame box for grid clipping; empty = unconstrained

    def __post_init__(self):
        self.y_groups = np.atleast_2d(np.asarray(self.y_groups, dtype=complex))
        self.noise_var = np.broadcast_to(
            np.asarray(self.noise_var, dtype=float), (len(self.groups),)
        ).copy()
        self.grid_xyz = np.atleast_2d(np.asarray(self.grid_xyz, dtype=float))
        self.user_xyz = np.atleast_2d(np.asarray(self.user_xyz, dtype=float))
        assigned = sorted(k for g in self.groups for k in g)
        if assigned != list(range(self.num_users)):
            raise ValueError("groups must partition the user set")

    @property
    def num_users(self):
        return self.user_xyz.shape[0]

    @property
    def num_grid(self):
        return self.grid_xyz.shape[0]

    def group_of(self):
        out = np.empty(self.num_users, dtype=int)
        for g, members in enumerate(self.groups):
            out[list(members)] = g
        return out

    def build_matrices(self, grid_xyz=None, user_xyz=None):
        grid = Grid(self.grid_xyz if grid_xyz is None else grid_xyz)
        users = self.user_xyz if user_xyz is None else user_xyz
        return [
            assemble_user_matrix(grid, users[k], self.pilots[k], self.geom, self.f0)
            for k in range(self.num_users)
        ]


@dataclass
class EStepResult:
    module_b: ModuleBResult
    mean: np.ndarray  # (K, Q+1)
    var: np.ndarray  # (K, Q+1)
    iterations: int = 0
    converged: bool = False
    diverged: bool = False
    residual_trace: list = field(default_factory=list)


def _damp(new: GaussianBelief, old: GaussianBelief | None, beta: float) -> GaussianBelief:
    if old is None or beta >= 1.0:
        return new
    return GaussianBelief(
        beta * new.mean + (1 - beta) * old.mean,
        beta * new.var + (1 - beta) * old.var,
    )


def e_step(problem: TurboProblem, phi_per_user, cfg: TurboConfig) -> EStepResult:
    """Alternate LMMSE and message passing for cfg.inner_iters rounds."""
    K = problem.num_users
    D = problem.num_grid + 1
    a_pri = GaussianBelief(
        np.zeros((K, D), dtype=complex),
        np.clip(problem.prior.marginal_prior_var(), cfg.var_min, cfg.var_max),
    )
    ext_ab = None
    ext_ba = None
    b_res = None
    prev_mean = None
    residuals = []
    rising = 0
    iterations = 0
    converged = diverged = False
    best = None
    best_residual = np.inf

    for it in range(cfg.inner_iters):
        iterations = it + 1
        # Module A per group block (exact: the stacked model is block diagonal)
        post_a = GaussianBelief(np.zeros((K, D), dtype=complex), np.ones((K, D)))
        for g, members in enumerate(problem.groups):
            phi_g = np.concatenate([phi_per_user[k] for k in members], axis=1)
            pri_g = GaussianBelief(
                np.concatenate([a_pri.mean[k] for k in members]),
                np.concatenate([a_pri.var[k] for k in members]),
            )
            post_g = lmmse_a(problem.y_groups[g], phi_g, pri_g, problem.noise_var[g])
            for i, k in enumerate(members):
                post_a.mean[k] = post_g.mean[i * D : (i + 1) * D]
                post_a.var[k] = post_g.var[i * D : (i + 1) * D]

        ext_ab = _damp(
            extrinsic(post_a, a_pri, cfg.var_min, cfg.var_max), ext_ab, cfg.damping if it else 1.0
        )
        b_res = module_b(ext_ab, problem.prior, cfg.var_min, cfg.var_max)
        ext_ba = _damp(b_res.ext, ext_ba, cfg.damping if it else 1.0)
        a_pri = GaussianBelief(ext_ba.mean.copy(), np.clip(ext_ba.var, cfg.var_min, cfg.var_max))

        # residual NMSE proxy for divergence detection
        res = 0.0
        denom = 0.0
        for g, members in enumerate(problem.groups):
            fit = np.zeros_like(problem.y_groups[g])
            for k in members:
                fit += phi_per_user[k] @ b_res.mean[k]
            res += float(np.sum(np.abs(problem.y_groups[g] - fit) ** 2))
            denom += float(np.sum(np.abs(problem.y_groups[g]) ** 2))
        residuals.append(res / max(denom, 1e-300))
        if residuals[-1] < best_residual:
            best_residual = residuals[-1]
            best = b_res
        if len(residuals) > 1 and residuals[-1] > residuals[-2] * (1.0 + 1e-4):
            rising += 1
            if rising >= 5:
                diverged = True
                break
        else:
            rising = 0

        if prev_mean is not None:
            delta = np.linalg.norm(b_res.mean - prev_mean)
            if delta <= cfg.estep_tol * max(np.linalg.norm(prev_mean), 1e-12):
                converged = True
                break
        prev_mean = b_res.mean.copy()

    # on oscillatory runs the last iterate can be past the sweet spot; hand
    # back the belief with the smallest data residual
    if best is None:
        best = b_res
    return EStepResult(
        module_b=best,
        mean=best.mean,
        var=best.var,
        iterations=iterations,
        converged=converged,
        diverged=diverged,
        residual_trace=residuals,
    )


def surrogate_objective(problem, phi_per_user, mean, var) -> float:
    """EM surrogate at fixed beliefs; larger is better."""
    total = 0.0
    for g, members in enumerate(problem.groups):
        w = 1.0 / problem.noise_var[g]
        fit = np.zeros_like(problem.y_groups[g])
        trace = 0.0
        for k in members:
            fit += phi_per_user[k] @ mean[k]
            trace += float(np.sum(var[k] * np.sum(np.abs(phi_per_user[k]) ** 2, axis=0)))
        total += w * (-float(np.sum(np.abs(problem.y_groups[g] - fit) ** 2)) - trace)
    return total


def surrogate_gradient(problem, grid_xyz, user_xyz, mean, var, refine_positions=True,
                       active=None):
    """Analytic gradient of the surrogate w.r.t. grid and user coordinates.

    ``active`` restricts the grid-point derivatives to an index subset
    (coordinates of quiet points keep a zero gradient, which is also what the
    full computation yields up to their negligible posterior mass).

    Returns (grad_grid (Q,3), grad_user (K,3), objective_value).
    """
    K = problem.num_users
    Q = grid_xyz.shape[0]
    grid = Grid(grid_xyz)
    group_of = problem.group_of()
    if active is None:
        active = np.arange(Q)
    else:
        active = np.asarray(active, dtype=int)

    phis = []
    grads = []
    for k in range(K):
        phis_k = user_matrix_gradients(
            grid, user_xyz[k], problem.pilots[k], problem.geom, problem.f0, active=active
        )
        phis.append(phis_k[0])
        grads.append(phis_k[1:])

    residual = []
    for g, members in enumerate(problem.groups):
        fit = np.zeros_like(problem.y_groups[g])
        for k in members:
            fit += phis[k] @ mean[k]
        residual.append(problem.y_groups[g] - fit)

    obj = 0.0
    for g, members in enumerate(problem.groups):
        w = 1.0 / problem.noise_var[g]
        trace = sum(
            float(np.sum(var[k] * np.sum(np.abs(phis[k]) ** 2, axis=0))) for k in members
        )
        obj += w * (-float(np.sum(np.abs(residual[g]) ** 2)) - trace)

    grad_grid = np.zeros((Q, 3))
    grad_user = np.zeros((K, 3))
    for k in range(K):
        g = group_of[k]
        w = 1.0 / problem.noise_var[g]
        r = residual[g]
        d_grid, d_user_nlos, d_user_los = grads[k]
        phi_k = phis[k]
        mean_a = mean[k][1 + active]
        var_a = var[k][1 + active]
        # data term: 2 Re[x_q^* d_col^H r]; trace term: 2 v_q Re[d_col^H phi_col]
        proj_r = np.einsum("qan,n->qa", d_grid.conj(), r)
        proj_phi = np.einsum("qan,nq->qa", d_grid.conj(), phi_k[:, 1 + active])
        grad_grid[active] += w * 2.0 * (
            np.real(np.conj(mean_a[:, None]) * proj_r)
            - var_a[:, None] * np.real(proj_phi)
        )
        if refine_positions:
            acc = 2.0 * np.real(np.conj(mean[k][0]) * (d_user_los.conj() @ r))
            acc -= 2.0 * var[k][0] * np.real(d_user_los.conj() @ phi_k[:, 0])
            proj_r_u = np.einsum("qan,n->qa", d_user_nlos.conj(), r)
            proj_phi_u = np.einsum("qan,nq->qa", d_user_nlos.conj(), phi_k[:, 1 + active])
            acc += 2.0 * np.sum(
                np.real(np.conj(mean_a[:, None]) * proj_r_u)
                - var_a[:, None] * np.real(proj_phi_u),
                axis=0,
            )
            grad_user[k] = w * acc
    return grad_grid, grad_user, obj


@dataclass
class MStepResult:
    grid_xyz: np.ndarray
    user_xyz: np.ndarray
    objective_trace: list  # surrogate values, starting point first
    accepted_steps: int


def m_step(problem: TurboProblem, beliefs: EStepResult, cfg: TurboConfig,
           grid_xyz=None, user_xyz=None) -> MStepResult:
    """Safeguarded gradient ascent on the surrogate; rejected steps halve."""
    grid_xyz = np.array(problem.grid_xyz if grid_xyz is None else grid_xyz, dtype=float)
    user_xyz = np.array(problem.user_xyz if user_xyz is None else user_xyz, dtype=float)
    mean, var = beliefs.mean, beliefs.var
    trace = []
    accepted = 0
    # quiet grid points carry no usable gradient; skip their derivative tensors
    weight = np.max(np.abs(mean[:, 1:]) ** 2 + var[:, 1:], axis=0)
    active = np.nonzero(weight > 1e-6 * max(float(weight.max(initial=0.0)), 1e-300))[0]

    for _ in range(cfg.mstep_ascent_steps):
        g_grid, g_user, obj = surrogate_gradient(
            problem, grid_xyz, user_xyz, mean, var, cfg.refine_positions, active=active
        )
        if not trace:
            trace.append(obj)
        scale = max(np.max(np.abs(g_grid), initial=0.0), np.max(np.abs(g_user), initial=0.0))
        if scale == 0.0 or not np.isfinite(scale):
            break
        step = cfg.mstep_init_step_m / scale
        improved = False
        for _ in range(cfg.mstep_backtracks):
            if step * scale < 1e-6:  # sub-micron moves cannot help
                break
            cand_grid = grid_xyz + step * g_grid
            if problem.region:
                cand_grid = clip_to_region(cand_grid, problem.region)
            cand_user = user_xyz + step * g_user if cfg.refine_positions else user_xyz
            phis = problem.build_matrices(cand_grid, cand_user)
            cand_obj = surrogate_objective(problem, phis, mean, var)
            if cand_obj >= obj:
                grid_xyz, user_xyz = cand_grid, cand_user
                trace.append(cand_obj)
                accepted += 1
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return MStepResult(grid_xyz, user_xyz, trace, accepted)


@dataclass
class TurboResult:
    x_hat: np.ndarray  # (K, Q+1)
    var: np.ndarray
    support_nlos: np.ndarray
    support_los: np.ndarray
    support_joint: np.ndarray
    grid_xyz: np.ndarray
    user_xyz: np.ndarray
    h_hat: np.ndarray  # (K, N, P)
    outer_iterations: int
    converged: bool
    diverged: bool
    objective_traces: list  # per outer iteration, the m-step surrogate values
    zeta_moves: list


def reconstruct_channels(grid_xyz, user_xyz, x_hat, geom, f0, subcarriers) -> np.ndarray:
    """(K, N, P) channel reconstruction from coefficients (pilot-free)."""
    grid = Grid(grid_xyz)
    ones = np.ones(subcarriers)
    out = []
    for k in range(x_hat.shape[0]):
        phi = assemble_user_matrix(grid, user_xyz[k], ones, geom, f0)
        out.append((phi @ x_hat[k]).reshape(subcarriers, geom.n_antennas).T)
    return np.stack(out)


def run_turbo(problem: TurboProblem, cfg: TurboConfig, subcarriers=None) -> TurboResult:
    """Alternate E and M steps until the uncertainty parameters settle."""
    if subcarriers is None:
        subcarriers = problem.pilots.shape[1]
    grid_xyz = problem.grid_xyz.copy()
    user_xyz = problem.user_xyz.copy()
    traces = []
    moves = []
    last = None
    converged = diverged = False

    for t in range(cfg.outer_iters):
        phis = problem.build_matrices(grid_xyz, user_xyz)
        est = e_step(problem, phis, cfg)
        diverged = diverged or est.diverged
        last = (grid_xyz.copy(), user_xyz.copy(), est)
        if t == cfg.outer_iters - 1:
            break
        ms = m_step(problem, est, cfg, grid_xyz, user_xyz)
        traces.append(ms.objective_trace)
        move = float(
            np.sqrt(np.sum((ms.grid_xyz - grid_xyz) ** 2) + np.sum((ms.user_xyz - user_xyz) ** 2))
        )
        moves.append(move)
        grid_xyz, user_xyz = ms.grid_xyz, ms.user_xyz
        if move <= cfg.zeta_tol_m:
            converged = True
            break

    grid_xyz, user_xyz, est = last
    h_hat = reconstruct_channels(
        grid_xyz, user_xyz, est.mean, problem.geom, problem.f0, subcarriers
    )
    return TurboResult(
        x_hat=est.mean,
        var=est.var,
        support_nlos=est.module_b.support_nlos,
        support_los=est.module_b.support_los,
        support_joint=est.module_b.support_joint,
        grid_xyz=grid_xyz,
        user_xyz=user_xyz,
        h_hat=h_hat,
        outer_iterations=len(moves) + 1,
        converged=converged,
        diverged=diverged,
        objective_traces=traces,
        zeta_moves=moves,
    )
