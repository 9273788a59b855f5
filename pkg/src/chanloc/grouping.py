"""Pilot-reuse user grouping: scatterer-distance interference graph, integer
particle-swarm graph coloring, and the outer adjacency-distance relaxation.

Users whose closest scatterers are nearer than the adjacency distance get an
edge and must not share a pilot group.  The swarm colors the graph with at
most G colors; when it cannot reach a conflict-free coloring, the adjacency
distance is relaxed and the graph rebuilt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GroupingConfig


class InfeasibleGrouping(RuntimeError):
    """Adjacency distance underflowed before a conflict-free grouping."""


def user_distance(points_a, points_b) -> float:
    """Minimum Euclidean distance between two users' scatterer sets.

    Users with no usable scatterer estimate interfere with nobody: empty
    lists give +inf.
    """
    a = np.asarray(points_a, dtype=float).reshape(-1, 3)
    b = np.asarray(points_b, dtype=float).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return float("inf")
    return float(np.min(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)))


def distance_matrix(per_user_points) -> np.ndarray:
    k = len(per_user_points)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = user_distance(per_user_points[i], per_user_points[j])
    return out


@dataclass(frozen=True)
class InterferenceGraph:
    adjacency: np.ndarray  # K x K symmetric 0/1, zero diagonal
    distances: np.ndarray  # K x K meters
    d_adj: float

    @property
    def num_users(self):
        return self.adjacency.shape[0]


def build_graph(distances, d_adj) -> InterferenceGraph:
    """Edge wherever the user distance falls below the adjacency distance."""
    if d_adj <= 0:
        raise ValueError("d_adj must be positive")
    distances = np.asarray(distances, dtype=float)
    adjacency = (distances < d_adj).astype(int)
    np.fill_diagonal(adjacency, 0)
    return InterferenceGraph(adjacency=adjacency, distances=distances, d_adj=float(d_adj))


def fitness(coloring, adjacency, num_groups) -> int:
    """Conflict count (ordered pairs, so each clashing edge counts twice)
    plus the excess-color penalty max(g - G, 0)."""
    coloring = np.asarray(coloring, dtype=int)
    same = coloring[:, None] == coloring[None, :]
    conflicts = int(np.sum(np.asarray(adjacency, dtype=int) * same.astype(int)))
    g_used = len(np.unique(coloring))
    return conflicts + max(g_used - num_groups, 0)


@dataclass
class Swarm:
    positions: np.ndarray  # (A, K) ints in {1..G}
    velocities: np.ndarray  # (A, K) ints
    pbest: np.ndarray  # (A, K)
    pbest_fitness: np.ndarray  # (A,)
    gbest: np.ndarray  # (K,)
    gbest_fitness: int
    num_groups: int
    c1: float = 2.0
    c2: float = 2.0
    velocity_limit: int | None = None

    @classmethod
    def initialize(cls, num_particles, num_users, num_groups, adjacency, rng,
                   c1=2.0, c2=2.0, velocity_limit=None) -> "Swarm":
        positions = rng.integers(1, num_groups + 1, size=(num_particles, num_users))
        fits = np.array([fitness(p, adjacency, num_groups) for p in positions])
        best = int(np.argmin(fits))
        return cls(
            positions=positions,
            velocities=np.zeros((num_particles, num_users), dtype=int),
            pbest=positions.copy(),
            pbest_fitness=fits,
            gbest=positions[best].copy(),
            gbest_fitness=int(fits[best]),
            num_groups=num_groups,
            c1=c1,
            c2=c2,
            velocity_limit=velocity_limit,
        )


def _uniform_int_toward(rng, bound):
    """Uniform integer in [0, bound] (or [bound, 0] for negative bounds)."""
    lo = np.minimum(bound, 0)
    hi = np.maximum(bound, 0)
    return rng.integers(lo, hi + 1)


def pso_step(swarm: Swarm, adjacency, rng) -> Swarm:
    """One velocity/position update in the integer search space.

    V' = int(V) + Z1 + Z2 with Z1, Z2 uniform integers drawn toward the
    personal and global bests; X' = X + V' clamped to {1..G}; bests update
    only on strict fitness decrease.
    """
    g = swarm.num_groups
    z1 = _uniform_int_toward(rng, np.floor(swarm.c1 * (swarm.pbest - swarm.positions)).astype(int))
    z2 = _uniform_int_toward(rng, np.floor(swarm.c2 * (swarm.gbest[None, :] - swarm.positions)).astype(int))
    velocities = swarm.velocities.astype(int) + z1 + z2
    vmax = swarm.velocity_limit if swarm.velocity_limit is not None else 2 * g
    velocities = np.clip(velocities, -vmax, vmax)
    positions = np.clip(swarm.positions + velocities, 1, g)

    fits = np.array([fitness(p, adjacency, g) for p in positions])
    pbest = swarm.pbest.copy()
    pbest_fitness = swarm.pbest_fitness.copy()
    improved = fits < pbest_fitness
    pbest[improved] = positions[improved]
    pbest_fitness[improved] = fits[improved]
    gbest = swarm.gbest
    gbest_fitness = swarm.gbest_fitness
    best = int(np.argmin(fits))
    if fits[best] < gbest_fitness:
        gbest = positions[best].copy()
        gbest_fitness = int(fits[best])
    return Swarm(
        positions=positions,
        velocities=velocities,
        pbest=pbest,
        pbest_fitness=pbest_fitness,
        gbest=gbest,
        gbest_fitness=gbest_fitness,
        num_groups=g,
        c1=swarm.c1,
        c2=swarm.c2,
        velocity_limit=swarm.velocity_limit,
    )


def _solve_coloring(adjacency, num_groups, cfg: GroupingConfig, rng):
    swarm = Swarm.initialize(
        cfg.particles, adjacency.shape[0], num_groups, adjacency, rng,
        c1=cfg.c1, c2=cfg.c2, velocity_limit=cfg.velocity_limit,
    )
    stagnant = 0
    for _ in range(cfg.max_iterations):
        if swarm.gbest_fitness == 0:
            break
        prev = swarm.gbest_fitness
        swarm = pso_step(swarm, adjacency, rng)
        stagnant = stagnant + 1 if swarm.gbest_fitness == prev else 0
        if stagnant >= cfg.stagnation_window:
            break
    return swarm


@dataclass(frozen=True)
class GroupAssignment:
    assignment: np.ndarray  # per user group id in {1..G}
    num_groups: int
    d_adj: float  # adjacency distance the final coloring satisfies
    fitness: int

    def groups(self) -> list:
        """Member lists ordered by group id; empty groups dropped."""
        out = []
        for g in range(1, self.num_groups + 1):
            members = [int(k) for k in np.nonzero(self.assignment == g)[0]]
            if members:
                out.append(members)
        return out

    def min_intra_group_distance(self, distances) -> float:
        best = float("inf")
        for members in self.groups():
            for i, a in enumerate(members):
                for b in members[i + 1 :]:
                    best = min(best, float(distances[a, b]))
        return best


def initial_adjacency_distance(distances, num_groups) -> float:
    """G/K-th percentile of the pairwise user-distance distribution."""
    k = distances.shape[0]
    pairs = distances[np.triu_indices(k, 1)]
    finite = pairs[np.isfinite(pairs)]
    if finite.size == 0:
        return 1.0
    return float(np.quantile(finite, min(1.0, num_groups / k)))


def group_users(per_user_points, num_groups, cfg: GroupingConfig = GroupingConfig(),
                rng=None, d_adj0=None, delta=None) -> GroupAssignment:
    """Full grouping pass: graph, swarm coloring, outer d_adj relaxation.

    Raises InfeasibleGrouping when the adjacency distance would have to drop
    to zero (or below) before a conflict-free coloring appears.
    """
    if num_groups < 1:
        raise ValueError("need at least one group")
    if rng is None:
        rng = np.random.default_rng(0)
    distances = distance_matrix(per_user_points)
    k = distances.shape[0]
    if num_groups >= k:
        return GroupAssignment(np.arange(1, k + 1), k, 0.0, 0)
    if d_adj0 is None:
        d_adj0 = initial_adjacency_distance(distances, num_groups)
    if delta is None:
        delta = cfg.delta_frac * d_adj0

    d_adj = d_adj0
    while True:
        graph = build_graph(distances, d_adj)
        swarm = _solve_coloring(graph.adjacency, num_groups, cfg, rng)
        if swarm.gbest_fitness == 0:
            return GroupAssignment(swarm.gbest.copy(), num_groups, d_adj, 0)
        d_adj = d_adj - delta
        if d_adj <= 0:
            raise InfeasibleGrouping(
                f"adjacency distance underflowed (started {d_adj0:.3f} m) "
                f"before a {num_groups}-group conflict-free coloring was found"
            )


def pilot_reduction_factor(num_users, num_groups) -> float:
    if num_groups < 1:
        raise ValueError("need at least one group")
    return num_users / num_groups


def export_grouping_csv(assignment: GroupAssignment, path):
    with open(path, "w") as fh:
        fh.write("user,group\n")
        for k, g in enumerate(assignment.assignment):
            fh.write(f"{k},{int(g)}\n")


def export_distance_cdf_csv(distances, assignment: GroupAssignment, path):
    """Intra-group pairwise distances with empirical CDF values."""
    values = []
    for members in assignment.groups():
        for i, a in enumerate(members):
            for b in members[i + 1 :]:
                if np.isfinite(distances[a, b]):
                    values.append(float(distances[a, b]))
    values.sort()
    with open(path, "w") as fh:
        fh.write("distance_m,cdf\n")
        n = len(values)
        for i, v in enumerate(values):
            fh.write(f"{v:.6f},{(i + 1) / n:.6f}\n")
