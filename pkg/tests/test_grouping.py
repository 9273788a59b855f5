import itertools

import numpy as np
import pytest

from chanloc.config import GroupingConfig
from chanloc.grouping import (
    GroupAssignment,
    InfeasibleGrouping,
    Swarm,
    build_graph,
    distance_matrix,
    fitness,
    group_users,
    initial_adjacency_distance,
    pilot_reduction_factor,
    pso_step,
    user_distance,
)


def exhaustive_proper_coloring_exists(adjacency, num_groups):
    """Brute-force certifier over all num_groups**K colorings."""
    k = adjacency.shape[0]
    edges = [(i, j) for i in range(k) for j in range(i + 1, k) if adjacency[i, j]]
    for coloring in itertools.product(range(1, num_groups + 1), repeat=k):
        if all(coloring[i] != coloring[j] for i, j in edges):
            return True
    return False


def test_user_distance_identical_lists_is_zero():
    pts = np.array([[1.0, 2, 3], [4, 5, 6]])
    assert user_distance(pts, pts) == 0.0


def test_user_distance_singletons():
    assert user_distance(np.array([[0.0, 0, 0]]), np.array([[7.0, 0, 0]])) == pytest.approx(7.0)


def test_user_distance_matches_brute_force():
    rng = np.random.default_rng(0)
    a = rng.uniform(-50, 50, size=(5, 3))
    b = rng.uniform(-50, 50, size=(4, 3))
    oracle = min(np.linalg.norm(p - q) for p in a for q in b)
    assert user_distance(a, b) == pytest.approx(oracle, rel=1e-12)


def test_user_distance_empty_is_infinite():
    assert user_distance(np.zeros((0, 3)), np.array([[1.0, 0, 0]])) == np.inf


def test_build_graph_thresholds():
    d = np.array([[0.0, 2, 5], [2, 0, 9], [5, 9, 0]])
    empty = build_graph(d, 1.0)
    assert empty.adjacency.sum() == 0
    complete = build_graph(d, 10.0)
    assert complete.adjacency.sum() == 6
    assert (np.diag(complete.adjacency) == 0).all()
    mixed = build_graph(d, 6.0)
    expected = (d < 6.0).astype(int)
    np.fill_diagonal(expected, 0)
    np.testing.assert_array_equal(mixed.adjacency, expected)
    np.testing.assert_array_equal(mixed.adjacency, mixed.adjacency.T)


def test_fitness_proper_coloring_is_zero():
    adj = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert fitness([1, 2, 1], adj, 2) == 0


def test_fitness_counts_conflicting_edges_twice():
    adj = np.array([[0, 1], [1, 0]])
    # direct evaluation of the ordered double sum: E_12*S_12 + E_21*S_21 = 2
    assert fitness([1, 1], adj, 2) == 2


def test_fitness_excess_color_penalty():
    adj = np.zeros((5, 5), dtype=int)
    # proper (edgeless) coloring using G + 2 colors
    assert fitness([1, 2, 3, 4, 5], adj, 3) == 2


def test_fitness_zero_implies_proper_coloring():
    rng = np.random.default_rng(1)
    for _ in range(50):
        k = int(rng.integers(3, 8))
        adj = (rng.random((k, k)) < 0.4).astype(int)
        adj = np.triu(adj, 1)
        adj = adj + adj.T
        coloring = rng.integers(1, 4, size=k)
        if fitness(coloring, adj, 3) == 0:
            assert all(
                coloring[i] != coloring[j]
                for i in range(k)
                for j in range(i + 1, k)
                if adj[i, j]
            )
            assert len(np.unique(coloring)) <= 3


def test_pso_fixed_point_when_converged():
    adj = np.zeros((4, 4), dtype=int)
    rng = np.random.default_rng(2)
    swarm = Swarm.initialize(3, 4, 3, adj, rng)
    swarm.positions[:] = swarm.gbest
    swarm.pbest[:] = swarm.gbest
    swarm.velocities[:] = 0
    swarm.pbest_fitness[:] = swarm.gbest_fitness
    stepped = pso_step(swarm, adj, rng)
    np.testing.assert_array_equal(stepped.positions, swarm.positions)
    np.testing.assert_array_equal(stepped.velocities, 0)


def test_pso_positions_stay_clamped():
    adj = np.zeros((1, 1), dtype=int)
    rng = np.random.default_rng(3)
    swarm = Swarm.initialize(1, 1, 4, adj, rng)
    for _ in range(1000):
        swarm = pso_step(swarm, adj, rng)
        assert 1 <= swarm.positions[0, 0] <= 4


def test_gbest_fitness_non_increasing():
    rng = np.random.default_rng(4)
    k = 8
    adj = (rng.random((k, k)) < 0.5).astype(int)
    adj = np.triu(adj, 1)
    adj = adj + adj.T
    swarm = Swarm.initialize(20, k, 3, adj, rng)
    history = [swarm.gbest_fitness]
    for _ in range(100):
        swarm = pso_step(swarm, adj, rng)
        history.append(swarm.gbest_fitness)
    assert all(b <= a for a, b in zip(history, history[1:]))


def test_group_users_empty_graph_any_coloring_fits():
    rng = np.random.default_rng(5)
    pts = [rng.uniform(1000 * k, 1000 * k + 1, size=(2, 3)) for k in range(5)]
    res = group_users(pts, 2, GroupingConfig(particles=20, max_iterations=50), rng=rng)
    assert res.fitness == 0
    d = distance_matrix(pts)
    assert res.min_intra_group_distance(d) >= res.d_adj


def test_group_users_triangle_three_groups():
    pts = [np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]), np.array([[0.0, 1, 0]])]
    d = distance_matrix(pts)
    graph = build_graph(d, 10.0)
    assert exhaustive_proper_coloring_exists(graph.adjacency, 3)
    res = group_users(pts, 3, rng=np.random.default_rng(6), d_adj0=10.0)
    assert res.fitness == 0
    assert len(set(res.assignment.tolist())) == 3


def test_group_users_relaxes_until_feasible():
    # triangle with side distances 1, 2, 3 and G=2: K3 is not 2-colorable,
    # so the outer loop must shrink d_adj below the longest side
    pts = [
        np.array([[0.0, 0, 0]]),
        np.array([[1.0, 0, 0]]),
        np.array([[-2.0, 0, 0]]),
    ]
    d = distance_matrix(pts)
    res = group_users(pts, 2, rng=np.random.default_rng(7), d_adj0=10.0, delta=0.5)
    assert res.fitness == 0
    assert res.d_adj < 10.0
    assert res.min_intra_group_distance(d) >= res.d_adj


def test_group_users_infeasible_when_distance_underflows():
    pts = [np.array([[0.0, 0, 0]])] * 3  # coincident users never separate
    with pytest.raises(InfeasibleGrouping):
        group_users(pts, 2, GroupingConfig(particles=10, max_iterations=30),
                    rng=np.random.default_rng(8), d_adj0=1.0, delta=0.3)


def test_group_users_trivial_when_groups_cover_users():
    pts = [np.array([[0.0, 0, 0]])] * 3
    res = group_users(pts, 3, rng=np.random.default_rng(9))
    assert sorted(res.assignment.tolist()) == [1, 2, 3]


def test_initial_adjacency_distance_is_percentile():
    d = np.array(
        [
            [0.0, 10.0, 20.0, 30.0],
            [10.0, 0.0, 40.0, 50.0],
            [20.0, 40.0, 0.0, 60.0],
            [30.0, 50.0, 60.0, 0.0],
        ]
    )
    # e = G/K = 0.5 -> median of {10,20,30,40,50,60}
    assert initial_adjacency_distance(d, 2) == pytest.approx(35.0)


def test_pilot_reduction_factor_values():
    assert pilot_reduction_factor(8, 8) == 1.0
    assert pilot_reduction_factor(200, 100) == 2.0
    assert pilot_reduction_factor(200, 50) == 4.0
    with pytest.raises(ValueError):
        pilot_reduction_factor(8, 0)


def test_pso_finds_certified_colorings():
    cfg = GroupingConfig(particles=50, max_iterations=500)
    found = 0
    total = 0
    for seed in range(12):
        rng = np.random.default_rng([20, seed])
        pts = [rng.uniform(0, 100, size=(3, 3)) for _ in range(8)]
        d = distance_matrix(pts)
        d0 = initial_adjacency_distance(d, 4)
        graph = build_graph(d, d0)
        if not exhaustive_proper_coloring_exists(graph.adjacency, 4):
            continue
        total += 1
        res = group_users(pts, 4, cfg, rng=np.random.default_rng([21, seed]), d_adj0=d0)
        found += res.fitness == 0 and res.d_adj == d0
    assert total >= 6
    assert found == total
