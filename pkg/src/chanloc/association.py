"""Cross-user scatterer association: density clustering of pooled coarse
estimates and centroid refinement of shared scatterers.

Labels follow the convention 0 = noise (an estimate seen by a single user),
m >= 1 = cluster id.  Visiting order is input order, so border points that
are reachable from several clusters deterministically join the first cluster
that reaches them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def dbscan(points, eps, min_pts):
    """Plain DBSCAN with Euclidean neighborhoods.

    The neighborhood count includes the query point itself, so a core point
    has at least min_pts points within eps counting itself.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    if n == 0:
        return np.zeros(0, dtype=int)
    dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    neighbors = [np.nonzero(dist[i] <= eps)[0] for i in range(n)]
    is_core = np.array([len(nb) >= min_pts for nb in neighbors])

    labels = np.zeros(n, dtype=int)
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not is_core[i]:
            continue
        cluster += 1
        labels[i] = cluster
        visited[i] = True
        frontier = list(neighbors[i])
        pos = 0
        while pos < len(frontier):
            j = frontier[pos]
            pos += 1
            if labels[j] == 0:
                labels[j] = cluster
            if not visited[j] and is_core[j]:
                visited[j] = True
                frontier.extend(neighbors[j])
    return labels


def refine(points, labels):
    """Cluster members move to their cluster centroid; noise stays put."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    labels = np.asarray(labels, dtype=int)
    refined = points.copy()
    for m in np.unique(labels):
        if m == 0:
            continue
        members = labels == m
        refined[members] = points[members].mean(axis=0)
    return refined


@dataclass
class AssociationResult:
    labels: np.ndarray  # per pooled estimate, 0 = noise
    refined: np.ndarray  # (n, 3) refined positions, pooled order
    origin_user: np.ndarray  # (n,) which user produced each estimate
    per_user_refined: list  # refined positions mapped back per user
    global_points: np.ndarray  # deduplicated set: one centroid per cluster + noise
    clusters: dict = field(default_factory=dict)  # cluster id -> pooled indices

    @property
    def num_clusters(self):
        return len(self.clusters)


def associate(per_user_points, eps, min_pts) -> AssociationResult:
    """Pool per-user coarse estimates, cluster, refine, and map back.

    ``per_user_points`` is a list of (n_k, 3) Cartesian arrays.  The returned
    global set (one centroid per cluster, plus noise points unchanged) is the
    natural grid initializer for the joint estimator.
    """
    if len(per_user_points) == 0:
        raise ValueError("need at least one user")
    arrays = [np.asarray(p, dtype=float).reshape(-1, 3) for p in per_user_points]
    counts = [a.shape[0] for a in arrays]
    pooled = (
        np.concatenate([a for a in arrays if a.size], axis=0)
        if any(counts)
        else np.zeros((0, 3))
    )
    origin = np.concatenate(
        [np.full(c, k, dtype=int) for k, c in enumerate(counts)]
    ) if any(counts) else np.zeros(0, dtype=int)

    labels = dbscan(pooled, eps, min_pts) if pooled.size else np.zeros(0, dtype=int)
    refined = refine(pooled, labels) if pooled.size else pooled

    clusters = {
        int(m): np.nonzero(labels == m)[0] for m in np.unique(labels) if m != 0
    }
    global_points = []
    for m in sorted(clusters):
        global_points.append(refined[clusters[m][0]])
    for i in np.nonzero(labels == 0)[0]:
        global_points.append(refined[i])
    global_points = np.array(global_points) if global_points else np.zeros((0, 3))

    per_user_refined = []
    start = 0
    for c in counts:
        per_user_refined.append(refined[start : start + c])
        start += c
    return AssociationResult(
        labels=labels,
        refined=refined,
        origin_user=origin,
        per_user_refined=per_user_refined,
        global_points=global_points,
        clusters=clusters,
    )


def export_labeled_cloud(result: AssociationResult, path):
    """CSV dump (x, y, z, user, label) of the pooled refined estimates."""
    with open(path, "w") as fh:
        fh.write("x,y,z,user,label\n")
        for p, user, label in zip(result.refined, result.origin_user, result.labels):
            fh.write(f"{p[0]:.6f},{p[1]:.6f},{p[2]:.6f},{int(user)},{int(label)}\n")
