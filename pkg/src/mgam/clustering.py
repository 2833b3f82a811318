"""Partition group members into preference subsets via global K-Means.

Users are clustered once over all of a dataset (L2-normalized binary
interaction vectors); each group is then partitioned by reusing the
global labels.  Clustering tiny groups separately would be degenerate,
and a single global clustering keeps identical users in identical
subsets across groups.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import UsageError


@dataclass
class KMeansResult:
    labels: np.ndarray      # (k,) cluster index per point
    centroids: np.ndarray   # (M, d)
    inertia: float          # sum of squared distances to assigned centroid
    inertia_history: list   # per-iteration inertia of the winning restart


@dataclass
class SubsetAssignment:
    """Ordered partition of one group's members into at most M subsets.

    Subsets are sorted by descending size, ties broken by the smallest
    member index; members inside each subset are in ascending index
    order.  The ordering is part of the model contract because subset
    slots carry their own parameters.
    """
    group: int
    subsets: list  # non-empty lists of member indices

    @property
    def m_effective(self) -> int:
        return len(self.subsets)


def build_user_features(dataset: Dataset) -> np.ndarray:
    """Binary interaction indicator rows, L2-normalized; zero rows stay zero."""
    feats = np.zeros((dataset.n_users, dataset.n_items))
    for u, items in enumerate(dataset.user_items):
        if items:
            feats[u, items] = 1.0
            feats[u] /= np.sqrt(len(items))
    return feats


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||p||^2 - 2 p.c + ||c||^2, clipped to fend off tiny negatives
    d2 = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    k = len(points)
    centroids = np.empty((m, points.shape[1]))
    centroids[0] = points[int(rng.integers(k))]
    closest = _squared_distances(points, centroids[:1]).ravel()
    for j in range(1, m):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(k))  # all points coincide with a centroid
        else:
            idx = int(np.searchsorted(np.cumsum(closest / total), rng.random()))
            idx = min(idx, k - 1)
        centroids[j] = points[idx]
        closest = np.minimum(closest, _squared_distances(points, centroids[j:j + 1]).ravel())
    return centroids


def _lloyd(points: np.ndarray, m: int, max_iters: int,
           rng: np.random.Generator) -> tuple:
    centroids = _kmeanspp_init(points, m, rng)
    labels = np.full(len(points), -1)
    point_range = np.arange(len(points))
    history = []
    for _ in range(max_iters):
        d2 = _squared_distances(points, centroids)
        new_labels = d2.argmin(axis=1)  # ties -> lowest centroid index
        # repair empty clusters: reseed at the point farthest from its centroid,
        # never stealing a cluster's only member
        assigned_d2 = d2[point_range, new_labels].copy()
        counts = np.bincount(new_labels, minlength=m)
        for j in range(m):
            if counts[j] == 0:
                candidates = np.where(counts[new_labels] >= 2, assigned_d2, -1.0)
                far = int(candidates.argmax())
                counts[new_labels[far]] -= 1
                counts[j] += 1
                new_labels[far] = j
                assigned_d2[far] = 0.0
        for j in range(m):
            centroids[j] = points[new_labels == j].mean(axis=0)
        inertia = float(_squared_distances(points, centroids)[point_range, new_labels].sum())
        history.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, centroids, history[-1], history


def kmeans(points: np.ndarray, m: int, max_iters: int = 100,
           restarts: int = 3, seed=0) -> KMeansResult:
    """Best-of-`restarts` seeded K-Means (k-means++ init, Lloyd updates)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise UsageError("kmeans expects a non-empty 2-D point matrix")
    if not 1 <= m <= len(points):
        raise UsageError(f"cluster count {m} must be in [1, n_points={len(points)}]")
    seed_base = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(seed_base + [r])
        labels, centroids, inertia, history = _lloyd(points, m, max_iters, rng)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels=labels, centroids=centroids,
                                inertia=inertia, inertia_history=history)
    return best


def partition_group(members, labels) -> list:
    """Group members by cluster label, dropping empty labels.

    Returns subsets ordered by descending size then smallest member index.
    """
    by_label = {}
    for u in members:
        by_label.setdefault(int(labels[u]), []).append(int(u))
    subsets = [sorted(s) for s in by_label.values()]
    subsets.sort(key=lambda s: (-len(s), s[0]))
    return subsets


def cluster_subsets(dataset: Dataset, m: int, max_iters: int = 100,
                    restarts: int = 3, seed=0) -> list:
    """Cluster all users once, then partition every group's members.

    Returns one SubsetAssignment per group.  The effective cluster count
    is clamped to the number of users.
    """
    if m < 1:
        raise UsageError("subset count must be at least 1")
    feats = build_user_features(dataset)
    result = kmeans(feats, min(m, dataset.n_users),
                    max_iters=max_iters, restarts=restarts, seed=seed)
    return [
        SubsetAssignment(group=g, subsets=partition_group(dataset.groups[g], result.labels))
        for g in range(dataset.n_groups)
    ]


def dump_subsets(assignments, dataset: Dataset, path) -> None:
    """Write `group_id<TAB>subset_index<TAB>user_id` lines."""
    with open(Path(path), "w", encoding="utf-8") as f:
        for a in assignments:
            for s_idx, subset in enumerate(a.subsets):
                for u in subset:
                    f.write(f"{dataset.group_ids[a.group]}\t{s_idx}\t{dataset.user_ids[u]}\n")
