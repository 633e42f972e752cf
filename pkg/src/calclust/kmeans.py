"""Lloyd's K-means with K-means++ seeding.

Used twice: to split each training batch into mini-clusters, and to extract
the prototypes that initialise the head weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .numerics import Rng, as_matrix


@dataclass
class KMeansResult:
    centers: np.ndarray  # (k, D)
    assignment: np.ndarray  # (N,) int64
    inertia: float
    iterations: int
    converged: bool


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    xx = np.einsum("ij,ij->i", x, x)[:, None]
    cc = np.einsum("ij,ij->i", centers, centers)[None, :]
    d = xx - 2.0 * (x @ centers.T) + cc
    np.maximum(d, 0.0, out=d)
    return d


def assign_nearest(x, centers) -> np.ndarray:
    """Index of the nearest center for every row of ``x`` (lowest index on ties)."""
    x = as_matrix(x, "x")
    centers = as_matrix(centers, "centers")
    if centers.shape[0] == 0:
        raise InvalidInputError("assign_nearest: no centers")
    if centers.shape[1] != x.shape[1]:
        raise InvalidInputError(
            f"assign_nearest: x has {x.shape[1]} columns, centers have {centers.shape[1]}"
        )
    return np.argmin(_sq_dists(x, centers), axis=1)


def _plus_plus(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0.0:
            r = rng.uniform() * total
            idx = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            idx = min(idx, n - 1)
        else:
            # every point already coincides with a center
            idx = int(rng.integers(n))
        chosen.append(idx)
        np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0], out=closest)
    return x[chosen].copy()


def _repair_empty(x, assignment, centers, k) -> np.ndarray:
    counts = np.bincount(assignment, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return assignment
    assignment = assignment.copy()
    dist = np.einsum("ij,ij->i", x - centers[assignment], x - centers[assignment])
    order = np.argsort(-dist, kind="stable")
    pos = 0
    for j in empty:
        # farthest point whose cluster can spare it
        while counts[assignment[order[pos]]] <= 1:
            pos += 1
        i = order[pos]
        counts[assignment[i]] -= 1
        assignment[i] = j
        counts[j] = 1
        pos += 1
    return assignment


def _centroids(x, assignment, k) -> np.ndarray:
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, assignment, x)
    counts = np.bincount(assignment, minlength=k).astype(np.float64)
    return sums / counts[:, None]


def kmeans(x, k: int, rng: Rng, max_iters: int = 100, tol: float = 1e-6,
           n_init: int = 1) -> KMeansResult:
    """Cluster the rows of ``x`` into ``k`` groups.

    Stops when the assignment is a fixed point or when the largest center
    displacement falls below ``tol`` times the data scale. Empty clusters are
    re-seeded with the point farthest from its current center, so every
    cluster in the result has at least one member. With ``n_init > 1`` the
    run with the lowest inertia is kept (first one on ties).
    """
    x = as_matrix(x, "x")
    n = x.shape[0]
    if k < 1 or k > n:
        raise InvalidInputError(f"kmeans: need 1 <= k <= N, got k={k}, N={n}")
    if max_iters < 1:
        raise InvalidInputError("kmeans: max_iters must be >= 1")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("kmeans: non-finite features")
    if n_init < 1:
        raise InvalidInputError("kmeans: n_init must be >= 1")
    best = None
    for _ in range(n_init):
        res = _lloyd(x, k, rng, max_iters, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def _lloyd(x, k, rng, max_iters, tol) -> KMeansResult:
    centers = _plus_plus(x, k, rng)
    scale = float(np.sqrt(np.mean(np.var(x, axis=0)))) or 1.0
    assignment = None
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        new_assignment = assign_nearest(x, centers)
        new_assignment = _repair_empty(x, new_assignment, centers, k)
        stable = assignment is not None and np.array_equal(new_assignment, assignment)
        assignment = new_assignment
        new_centers = _centroids(x, assignment, k)
        shift = float(np.sqrt(np.max(np.sum((new_centers - centers) ** 2, axis=1))))
        centers = new_centers
        if stable or shift <= tol * scale:
            converged = True
            break

    final = assign_nearest(x, centers)
    if np.array_equal(final, assignment):
        assignment = final
    else:
        # not at a fixed point; keep the nearest-center labelling but never
        # hand back an empty cluster
        assignment = _repair_empty(x, final, centers, k)
    diff = x - centers[assignment]
    inertia = float(np.einsum("ij,ij->", diff, diff))
    return KMeansResult(centers, assignment.astype(np.int64), inertia, it, converged)
