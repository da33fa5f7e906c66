"""Independent reference implementations used to cross-check the solvers.

Everything here is deliberately brute force and shares no code with the
package: QP by enumerating active-set sign patterns, FCLS by dense simplex
grid search, clustering by explicit feature-space k-means and exhaustive
set-partition enumeration.
"""

from __future__ import annotations

import itertools

import numpy as np


def qp_enumeration_oracle(q, c, nonneg_idx, a_eq=None, b_eq=None, feas_tol=1e-9):
    """Globally solve min 0.5 z'Qz - c'z (z >= 0 on nonneg_idx, optional
    equalities) by trying every subset of the bound constraints as the
    active set and keeping the best feasible stationary point.

    Requires Q positive definite so each face system is uniquely solvable.
    Returns (z_best, objective_best).
    """
    n = q.shape[0]
    nonneg_idx = list(nonneg_idx)
    m_eq = 0 if a_eq is None else a_eq.shape[0]
    best_obj = np.inf
    best_z = None
    for r in range(len(nonneg_idx) + 1):
        for active in itertools.combinations(nonneg_idx, r):
            free = [i for i in range(n) if i not in active]
            nf = len(free)
            kkt = np.zeros((nf + m_eq, nf + m_eq))
            kkt[:nf, :nf] = q[np.ix_(free, free)]
            rhs = np.zeros(nf + m_eq)
            rhs[:nf] = c[free]
            if m_eq:
                kkt[:nf, nf:] = a_eq[:, free].T
                kkt[nf:, :nf] = a_eq[:, free]
                rhs[nf:] = b_eq
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            z = np.zeros(n)
            z[free] = sol[:nf]
            if any(z[i] < -feas_tol for i in nonneg_idx):
                continue
            if m_eq and np.abs(a_eq @ z - b_eq).max() > feas_tol:
                continue
            obj = 0.5 * z @ q @ z - c @ z
            if obj < best_obj:
                best_obj = obj
                best_z = z
    return best_z, best_obj


def simplex_grid(r, resolution):
    """All points of the unit simplex in R^r with coordinates i/resolution."""
    pts = []
    for combo in itertools.combinations(range(resolution + r - 1), r - 1):
        parts = []
        prev = -1
        for cut in combo:
            parts.append(cut - prev - 1)
            prev = cut
        parts.append(resolution + r - 2 - prev)
        pts.append(parts)
    return np.asarray(pts, dtype=float) / resolution


def fcls_grid_oracle(r_pixel, m, resolution=1000):
    """Dense simplex-grid search for argmin ||r - M a||^2 on the simplex."""
    grid = simplex_grid(m.shape[1], resolution)  # (G, R)
    residuals = m @ grid.T - r_pixel[:, None]    # (L, G)
    errors = np.einsum("lg,lg->g", residuals, residuals)
    return grid[int(np.argmin(errors))]


def plain_kmeans(points, k, init, max_iter=100):
    """Standard Lloyd k-means on raw coordinates, lowest-index tie-breaks.

    Mirrors the package's update order (assign to nearest current-mean,
    recompute means) without any kernel machinery.
    """
    assignment = np.array(init, dtype=np.intp)
    for _ in range(max_iter):
        means = np.stack([points[assignment == j].mean(axis=0) for j in range(k)])
        d2 = ((points[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        new_assignment = np.argmin(d2, axis=1).astype(np.intp)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return assignment


def clustering_error_direct(gram, assignment):
    """Feature-space clustering error straight from the kernel expansion."""
    total = 0.0
    for label in np.unique(assignment):
        idx = np.flatnonzero(assignment == label)
        nk = idx.size
        block = gram[np.ix_(idx, idx)]
        for ell in idx:
            total += (
                gram[ell, ell]
                - 2.0 * gram[ell, idx].sum() / nk
                + block.sum() / nk**2
            )
    return total


def all_partitions_error_min(gram, k):
    """Minimum clustering error over every partition of the points into
    exactly k non-empty clusters (canonical-labeling enumeration)."""
    l = gram.shape[0]
    best = np.inf
    # First point is always in cluster 0; enumerate label vectors in
    # restricted-growth form so each set partition appears exactly once.
    def grow(labels, used):
        nonlocal best
        if len(labels) == l:
            if used == k:
                err = clustering_error_direct(gram, np.asarray(labels))
                best = min(best, err)
            return
        for lab in range(min(used + 1, k)):
            grow(labels + [lab], max(used, lab + 1))

    grow([0], 1)
    return best
