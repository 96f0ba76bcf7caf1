"""Spherical k-means: cosine-similarity clustering of unit vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClusterModel:
    centroids: np.ndarray       # (k, d), unit rows
    assignments: np.ndarray     # (B,), values in 0..k-1
    n_iters: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _plus_plus_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeding by cosine distance: far points are likelier later centers."""
    n = points.shape[0]
    centers = [int(rng.integers(0, n))]
    for _ in range(1, k):
        sims = points @ points[centers].T
        dist = 1.0 - sims.max(axis=1)
        dist = np.maximum(dist, 0.0) ** 2
        total = dist.sum()
        if total <= 0.0:
            # all points coincide with a chosen center; fall back to uniform
            centers.append(int(rng.integers(0, n)))
            continue
        centers.append(int(rng.choice(n, p=dist / total)))
    return points[centers].copy()


def spherical_kmeans(embeddings: np.ndarray, k: int, iters: int = 20,
                     seed: int = 0) -> ClusterModel:
    """Cluster unit rows by cosine similarity.

    Centroids are renormalized means of their members. An empty cluster is
    reseeded from the point farthest in cosine from its current centroid.
    Deterministic for a fixed seed.
    """
    points = np.asarray(embeddings, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if k < 1:
        raise ValueError("k must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1D5]))
    centroids = _plus_plus_seed(points, k, rng)
    assignments = np.zeros(n, dtype=int)
    n_iters = 0
    for n_iters in range(1, iters + 1):
        sims = points @ centroids.T
        new_assignments = sims.argmax(axis=1)
        for cluster in range(k):
            members = new_assignments == cluster
            if not members.any():
                worst = int(np.argmin(sims[np.arange(n), new_assignments]))
                new_assignments[worst] = cluster
                members = new_assignments == cluster
            mean = points[members].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm < 1e-12:
                # antipodal members cancel; keep a member as the centroid
                mean = points[np.nonzero(members)[0][0]]
                norm = 1.0
            centroids[cluster] = mean / norm
        if n_iters > 1 and np.array_equal(new_assignments, assignments):
            assignments = new_assignments
            break
        assignments = new_assignments
    return ClusterModel(centroids=centroids, assignments=assignments, n_iters=n_iters)
