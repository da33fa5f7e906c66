"""Band selection by kernel k-means over the rows of the endmember matrix.

Each spectral band is represented by its row of the endmember matrix and
mapped implicitly into the kernel feature space. Bands are clustered there
with Lloyd iterations; a cluster's representative band is the one closest
to the (implicit) cluster centroid, i.e. the medoid in feature space.

The incremental "global" strategy grows the clustering one cluster at a
time: the exact variant tries every band as the new singleton seed and
keeps the best converged run, while the fast variant scores every candidate
by its guaranteed error reduction and runs a single k-means from the best
seed. All ties break toward the lowest index, so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import gram_matrix
from .model import BandSelection

__all__ = [
    "Clustering",
    "point_to_centroid_sq",
    "kernel_kmeans",
    "global_kernel_kmeans",
    "select_bands",
    "select_bands_random",
]

# Relative slack for the per-iteration error-monotonicity assertion.
_MONOTONE_SLACK = 1e-12


@dataclass(frozen=True)
class Clustering:
    """A hard assignment of L bands to K non-empty clusters, with the
    total and per-cluster feature-space error."""

    assignment: np.ndarray
    error: float
    per_cluster_error: np.ndarray

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.intp)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        pce = np.array(self.per_cluster_error, dtype=float)
        pce.setflags(write=False)
        object.__setattr__(self, "per_cluster_error", pce)
        k = pce.shape[0]
        counts = np.bincount(a, minlength=k)
        if a.size and (a.min() < 0 or a.max() >= k):
            raise ValueError("assignment labels outside [0, K)")
        if np.any(counts == 0):
            raise ValueError("every cluster must be non-empty")
        if abs(self.error - pce.sum()) > 1e-10 * max(1.0, abs(self.error)):
            raise ValueError("error does not match the per-cluster sum")

    @property
    def n_clusters(self):
        return self.per_cluster_error.shape[0]


def point_to_centroid_sq(gram, ell, cluster):
    """Squared feature-space distance from band ``ell`` to the centroid of
    ``cluster`` (an index set):

        K[l,l] - (2/N) sum_i K[l,i] + (1/N^2) sum_ij K[i,j]
    """
    cluster = np.asarray(cluster, dtype=np.intp)
    if cluster.size == 0:
        raise ValueError("cluster must be non-empty")
    n_k = cluster.size
    cross = gram[ell, cluster].sum()
    pairs = gram[np.ix_(cluster, cluster)].sum()
    return float(gram[ell, ell] - 2.0 * cross / n_k + pairs / n_k**2)


def _all_sq_distances(gram, assignment, k):
    """(L, K) matrix of squared distances from every band to every cluster
    centroid, plus cluster sizes. Uses cached per-cluster kernel sums so a
    full sweep costs O(L^2 K) matrix work rather than per-point loops."""
    l = gram.shape[0]
    onehot = np.zeros((l, k))
    onehot[np.arange(l), assignment] = 1.0
    counts = onehot.sum(axis=0)
    s1 = gram @ onehot                      # s1[l, k] = sum_{i in C_k} K[l, i]
    s2 = (onehot * s1).sum(axis=0)          # s2[k] = sum_{i,j in C_k} K[i, j]
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.diag(gram)[:, None] - 2.0 * s1 / counts + s2 / counts**2
        d2[:, counts == 0] = np.inf
    return d2, counts


def _clustering_error(gram, assignment, k):
    d2, counts = _all_sq_distances(gram, assignment, k)
    own = d2[np.arange(gram.shape[0]), assignment]
    per_cluster = np.zeros(k)
    np.add.at(per_cluster, assignment, own)
    return float(own.sum()), per_cluster, d2, counts


def _repair_empty(gram, assignment, k):
    """Reseed each empty cluster with the band farthest from its own
    centroid (recomputed after every move)."""
    while True:
        d2, counts = _all_sq_distances(gram, assignment, k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return assignment
        own = d2[np.arange(gram.shape[0]), assignment]
        # Do not strip a singleton to fill another hole.
        own[counts[assignment] <= 1] = -np.inf
        assignment[int(np.argmax(own))] = empty[0]


def kernel_kmeans(gram, k, init, max_iter=100):
    """Lloyd iterations in kernel feature space from a given assignment.

    Stops when the assignment is stable or after ``max_iter`` sweeps. The
    clustering error is checked to be non-increasing on every sweep; empty
    clusters are repaired by reseeding with the farthest-from-centroid band.
    """
    gram = np.asarray(gram, dtype=float)
    l = gram.shape[0]
    if k < 1 or k > l:
        raise ValueError(f"k must be in [1, {l}], got {k}")
    assignment = np.array(init, dtype=np.intp)
    if assignment.shape != (l,):
        raise ValueError(f"init must have length {l}")
    if assignment.min() < 0 or assignment.max() >= k:
        raise ValueError(f"init labels must lie in [0, {k})")
    if np.unique(assignment).size != k:
        raise ValueError(f"init must populate all {k} clusters")
    prev_error = np.inf
    for _ in range(max_iter):
        d2, counts = _all_sq_distances(gram, assignment, k)
        new_assignment = np.argmin(d2, axis=1).astype(np.intp)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = _repair_empty(gram, new_assignment, k)
        error = _clustering_error(gram, assignment, k)[0]
        if error > prev_error + _MONOTONE_SLACK * max(1.0, abs(prev_error)):
            raise AssertionError(
                f"clustering error increased: {prev_error!r} -> {error!r}"
            )
        prev_error = error
    error, per_cluster, _, _ = _clustering_error(gram, assignment, k)
    return Clustering(assignment=assignment, error=error, per_cluster_error=per_cluster)


def global_kernel_kmeans(gram, k, fast=True, max_iter=100):
    """Incremental clustering from 1 to k clusters.

    At each level a new cluster is seeded at a band n: the seed init moves
    every band closer (in feature space) to n than to its own current
    centroid into the new cluster. The exact variant (fast=False) runs
    kernel k-means from every band's seed init and keeps the best converged
    result; the fast variant scores each band by the error reduction its
    seed init guarantees, sum_l max(0, d2(l, centroid(l)) - ||phi(l) -
    phi(n)||^2), and runs a single k-means from the best-scoring seed.
    """
    gram = np.asarray(gram, dtype=float)
    l = gram.shape[0]
    if k < 1 or k > l:
        raise ValueError(f"k must be in [1, {l}], got {k}")
    assignment = np.zeros(l, dtype=np.intp)
    clustering = kernel_kmeans(gram, 1, assignment, max_iter)
    diag = np.diag(gram)
    # d2_points[i, j] = ||phi(i) - phi(j)||^2, fixed across levels
    d2_points = diag[:, None] - 2.0 * gram + diag[None, :]
    for m in range(2, k + 1):
        assignment = clustering.assignment
        own = _all_sq_distances(gram, assignment, m - 1)[0][np.arange(l), assignment]
        if fast:
            gain = np.maximum(own[:, None] - d2_points, 0.0).sum(axis=0)
            seeds = [int(np.argmax(gain))]
        else:
            seeds = range(l)
        best = None
        for n in seeds:
            init = assignment.copy()
            init[d2_points[:, n] < own] = m - 1
            init[n] = m - 1
            if np.unique(init).size < m:
                # The seed emptied some cluster; refill before running.
                init = _repair_empty(gram, init, m)
            result = kernel_kmeans(gram, m, init, max_iter)
            if best is None or result.error < best.error:
                best = result
        clustering = best
    return clustering


def select_bands(m, n_b, kernel, fast=True, max_iter=100):
    """Cluster the bands of an endmember matrix and keep each cluster's
    medoid band (closest to its centroid, ties to the lowest band index).

    Returns a BandSelection with sorted indices and clustering diagnostics.
    """
    if n_b < 1 or n_b > m.n_bands:
        raise ValueError(f"n_b must be in [1, {m.n_bands}], got {n_b}")
    gram = gram_matrix(kernel, m.data)
    clustering = global_kernel_kmeans(gram, n_b, fast=fast, max_iter=max_iter)
    d2, _ = _all_sq_distances(gram, clustering.assignment, n_b)
    indices = []
    for cluster_id in range(n_b):
        members = np.flatnonzero(clustering.assignment == cluster_id)
        indices.append(int(members[np.argmin(d2[members, cluster_id])]))
    return BandSelection(
        indices=np.sort(np.asarray(indices, dtype=np.intp)),
        clusters=clustering.assignment,
        cluster_error=clustering.error,
        extra={"kernel": kernel.to_config(), "method": "kkmbs"},
    )


def select_bands_random(l, n_b, seed):
    """Uniform band sample without replacement, sorted ascending."""
    if n_b < 1 or n_b > l:
        raise ValueError(f"n_b must be in [1, {l}], got {n_b}")
    rng = np.random.default_rng(seed)
    indices = np.sort(rng.choice(l, size=n_b, replace=False).astype(np.intp))
    return BandSelection(
        indices=indices,
        clusters=None,
        cluster_error=None,
        extra={"method": "random", "seed": int(seed)},
    )
