"""Convex quadratic programming: minimize 0.5*z'Qz - c'z subject to
nonnegativity on a designated index subset and optional linear equalities.

The solver is a primal active-set method. Unconstrained ("free") variables
are eliminated exactly through a Schur complement on the corresponding
principal block whenever no equality constraints are present, which reduces
the inequality-constrained part to the constrained block alone; this is the
dominant cost saving for the dual problems solved per pixel during
unmixing. Pure nonnegativity problems get a projected-gradient warm start
before the active-set iterations. All pivot ties break toward the lowest
index, so solves are deterministic.
"""

from __future__ import annotations

from dataclasses import InitVar, dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

__all__ = ["QpProblem", "QpSolution", "solve_qp", "kkt_residual"]

# Acceptance threshold for indefiniteness, relative to trace(Q).
_PSD_RTOL = 1e-8


@dataclass(frozen=True)
class QpProblem:
    """minimize 0.5*z'qz - c'z  s.t.  z[i] >= 0 for i in nonneg_idx,
    a_eq @ z = b_eq (optional).

    ``trusted=True`` skips the defensive copies and symmetry/range checks;
    it is for internal hot loops whose arrays satisfy the invariants by
    construction (the per-pixel dual problems are built thousands of times).
    """

    q: np.ndarray
    c: np.ndarray
    nonneg_idx: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    trusted: InitVar[bool] = False

    def __post_init__(self, trusted):
        if trusted:
            object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
            object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
            object.__setattr__(
                self, "nonneg_idx", np.asarray(self.nonneg_idx, dtype=np.intp)
            )
            return
        q = np.array(self.q, dtype=float)
        c = np.array(self.c, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError(f"q must be square, got shape {q.shape}")
        n = q.shape[0]
        if n < 1 or c.shape != (n,):
            raise ValueError(f"c must have shape ({n},), got {c.shape}")
        asym = np.abs(q - q.T).max() if n else 0.0
        if asym > 1e-10 * max(1.0, np.abs(q).max()):
            raise ValueError(f"q is not symmetric (max asymmetry {asym:.3e})")
        q = 0.5 * (q + q.T)
        q.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "c", c)
        idx = np.unique(np.asarray(self.nonneg_idx, dtype=np.intp))
        if idx.size and (idx[0] < 0 or idx[-1] >= n):
            raise ValueError(f"nonneg_idx out of range for n={n}")
        idx.setflags(write=False)
        object.__setattr__(self, "nonneg_idx", idx)
        if (self.a_eq is None) != (self.b_eq is None):
            raise ValueError("a_eq and b_eq must be given together")
        if self.a_eq is not None:
            a = np.array(self.a_eq, dtype=float)
            b = np.array(self.b_eq, dtype=float)
            if a.ndim != 2 or a.shape[1] != n or b.shape != (a.shape[0],):
                raise ValueError(
                    f"equality shapes {a.shape}, {b.shape} inconsistent with n={n}"
                )
            a.setflags(write=False)
            b.setflags(write=False)
            object.__setattr__(self, "a_eq", a)
            object.__setattr__(self, "b_eq", b)

    @property
    def n(self):
        return self.q.shape[0]


@dataclass(frozen=True)
class QpSolution:
    z: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    status: str  # "converged" | "max_iter" | "infeasible"
    objective_trace: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        z.setflags(write=False)
        object.__setattr__(self, "z", z)
        tr = np.array(self.objective_trace, dtype=float)
        tr.setflags(write=False)
        object.__setattr__(self, "objective_trace", tr)


def _objective(q, c, z):
    return 0.5 * (z @ (q @ z)) - c @ z


def _chol_with_shift(q, ref_scale):
    """Cholesky factor of q, adding the smallest diagonal shift that works.

    Returns (factor, shift). Raises LinAlgError only if even large shifts
    fail (non-finite input).
    """
    try:
        return cho_factor(q, lower=True, check_finite=False), 0.0
    except LinAlgError:
        pass
    n = q.shape[0]
    eye = np.eye(n)
    lam_min = float(np.linalg.eigvalsh(q)[0]) if n else 0.0
    shift = max(-lam_min, 0.0) + 1e-15 * max(ref_scale, 1.0)
    for _ in range(8):
        try:
            return cho_factor(q + shift * eye, lower=True, check_finite=False), shift
        except LinAlgError:
            shift *= 10.0
    raise LinAlgError("matrix cannot be shifted to positive definite")


def _check_psd(q, ref_trace):
    """Reject matrices indefinite beyond -_PSD_RTOL * trace."""
    try:
        cho_factor(q, lower=True, check_finite=False)
        return
    except LinAlgError:
        pass
    lam_min = float(np.linalg.eigvalsh(q)[0])
    floor = -_PSD_RTOL * max(ref_trace, 1e-300)
    if lam_min < floor:
        raise ValueError(
            f"q is not positive semidefinite: min eigenvalue {lam_min:.3e} "
            f"below tolerance {floor:.3e}"
        )


def _pg_warm_start(q, c, steps=12):
    """A few projected-gradient steps for the all-nonnegative problem.

    The step 1/||q||_1 guarantees monotone descent, so the objective trace
    stays non-increasing end to end. Only worth it above a couple dozen
    variables: below that the active-set face solves are cheaper than the
    gradient sweeps, so tiny problems skip straight to the active set.
    """
    if q.shape[0] < 32:
        return np.zeros(q.shape[0]), []
    lip = np.abs(q).sum(axis=0).max()
    if not lip > 0:
        return np.zeros(q.shape[0]), []
    z = np.zeros(q.shape[0])
    trace = []
    for _ in range(steps):
        g = q @ z - c
        z_new = np.maximum(z - g / lip, 0.0)
        if np.array_equal(z_new, z):
            break
        z = z_new
        trace.append(_objective(q, c, z))
    return z, trace


def _nnqp(q, c, z0, tol, max_iter, ref_scale):
    """Active-set solve of min 0.5*z'qz - c'z s.t. z >= 0 (all coordinates).

    Lawson-Hanson style: grow the free set one most-violating coordinate at
    a time, with exact face solves and line searches back to the boundary.
    Returns (z, iterations, trace).
    """
    n = q.shape[0]
    z = np.maximum(z0, 0.0)
    free = z > 0.0
    trace = []
    iters = 0

    def face_solve(mask):
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return idx, np.empty(0)
        qff = q[np.ix_(idx, idx)]
        factor, _ = _chol_with_shift(qff, ref_scale)
        return idx, cho_solve(factor, c[idx])

    def settle_face():
        """Drive z to the optimum of the current face, shrinking it as
        bound constraints block the way."""
        nonlocal iters
        while True:
            iters += 1
            idx, y = face_solve(free)
            if idx.size == 0:
                z[:] = 0.0
                return True
            neg = y <= 0.0
            if not neg.any():
                z[:] = 0.0
                z[idx] = y
                trace.append(_objective(q, c, z))
                return True
            zf = z[idx]
            denom = zf[neg] - y[neg]
            with np.errstate(divide="ignore", invalid="ignore"):
                steps = np.where(denom > 0.0, zf[neg] / denom, 0.0)
            alpha = float(steps.min())
            z[idx] = zf + alpha * (y - zf)
            # Deactivate every coordinate driven to (or past) the bound.
            blocked = idx[neg][steps <= alpha]
            z[blocked] = 0.0
            free[blocked] = False
            z[z < 0.0] = 0.0
            trace.append(_objective(q, c, z))
            if iters >= max_iter:
                return False

    if free.any():
        if not settle_face():
            return z, iters, trace
    while iters < max_iter:
        g = q @ z - c
        w = -g
        w[free] = -np.inf
        j = int(np.argmax(w))
        if w[j] <= tol:
            break
        free[j] = True
        if not settle_face():
            break
    return z, iters, trace


def _phase1(a_eq, b_eq, nonneg_idx, n, tol):
    """Find z with a_eq z = b_eq and z >= 0 on nonneg_idx, or None."""
    feas_tol = max(tol, 1e-9) * (1.0 + np.abs(b_eq).max(initial=0.0))
    z_ln, *_ = np.linalg.lstsq(a_eq, b_eq, rcond=None)
    if np.abs(a_eq @ z_ln - b_eq).max() > feas_tol:
        return None  # inconsistent equality system
    if z_ln[nonneg_idx].min(initial=0.0) >= 0.0:
        return z_ln
    nonneg_mask = np.zeros(n, dtype=bool)
    nonneg_mask[nonneg_idx] = True
    a_n = a_eq[:, nonneg_mask]
    a_f = a_eq[:, ~nonneg_mask]
    if a_f.shape[1]:
        qbasis, _ = np.linalg.qr(a_f)
        b_proj = b_eq - qbasis @ (qbasis.T @ b_eq)
        a_proj = a_n - qbasis @ (qbasis.T @ a_n)
    else:
        b_proj = b_eq
        a_proj = a_n
    qq = a_proj.T @ a_proj
    cc = a_proj.T @ b_proj
    y, _, _ = _nnqp(qq, cc, np.zeros(qq.shape[0]), 1e-12, 200, np.trace(qq))
    z = np.zeros(n)
    z[nonneg_mask] = y
    if a_f.shape[1]:
        zf, *_ = np.linalg.lstsq(a_f, b_eq - a_n @ y, rcond=None)
        z[~nonneg_mask] = zf
    if np.abs(a_eq @ z - b_eq).max() > feas_tol:
        return None
    return z


def _eq_active_set(q, c, a_eq, b_eq, nonneg_mask, z0, tol, max_iter, ref_scale):
    """Primal active set with equality constraints kept in the KKT system.

    Returns (z, iterations, trace).
    """
    n = q.shape[0]
    m = a_eq.shape[0]
    z = z0.copy()
    z[nonneg_mask & (np.abs(z) < 1e-14)] = 0.0
    active = nonneg_mask & (z <= 0.0)
    trace = []
    iters = 0

    def kkt_solve(fidx):
        nf = fidx.size
        kkt = np.zeros((nf + m, nf + m))
        kkt[:nf, :nf] = q[np.ix_(fidx, fidx)]
        kkt[:nf, nf:] = a_eq[:, fidx].T
        kkt[nf:, :nf] = a_eq[:, fidx]
        rhs = np.concatenate([c[fidx], b_eq])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        return sol[:nf], sol[nf:]

    while iters < max_iter:
        iters += 1
        fidx = np.flatnonzero(~active)
        y, nu = kkt_solve(fidx)
        step = y - z[fidx]
        if np.abs(step).max(initial=0.0) <= 1e-12 * (1.0 + np.abs(y).max(initial=0.0)):
            # Face optimum: examine multipliers of the active bounds.
            # kkt_solve returns nu for the +nu'(Az-b) convention, so the
            # bound multipliers are lambda = g + A'nu on the active set.
            g = q @ z - c
            aidx = np.flatnonzero(active)
            if aidx.size == 0:
                return z, iters, trace
            lam = g[aidx] + a_eq[:, aidx].T @ nu
            jrel = int(np.argmin(lam))
            if lam[jrel] >= -tol:
                return z, iters, trace
            active[aidx[jrel]] = False
            continue
        # Line search toward the face optimum, stopping at the first bound.
        limit = nonneg_mask[fidx] & (step < 0.0)
        alpha = 1.0
        if limit.any():
            ratios = -z[fidx][limit] / step[limit]
            alpha = min(1.0, float(ratios.min()))
        if alpha >= 1.0:
            z[fidx] = y
        else:
            z[fidx] = z[fidx] + alpha * step
            hit = fidx[limit][ratios <= alpha]
            z[hit] = 0.0
            active[hit] = True
        znn = z[nonneg_mask]
        znn[znn < 0.0] = 0.0
        z[nonneg_mask] = znn
        trace.append(_objective(q, c, z))
    return z, iters, trace


def kkt_residual(p, z):
    """Infinity norm of stationarity, complementarity, and feasibility
    violations at z, with multipliers recovered by least squares."""
    z = np.asarray(z, dtype=float)
    g = p.q @ z - p.c
    n = p.n
    nonneg_mask = np.zeros(n, dtype=bool)
    nonneg_mask[p.nonneg_idx] = True
    if p.a_eq is not None:
        # Equality multipliers from rows where no bound multiplier can act.
        inactive = ~nonneg_mask | (z > 0.0)
        rows = np.flatnonzero(inactive)
        basis = p.a_eq[:, rows].T if rows.size else p.a_eq.T
        target = g[rows] if rows.size else g
        nu, *_ = np.linalg.lstsq(basis, target, rcond=None)
        g_reduced = g - p.a_eq.T @ nu
        feas_eq = np.abs(p.a_eq @ z - p.b_eq).max(initial=0.0)
    else:
        g_reduced = g
        feas_eq = 0.0
    lam = np.zeros(n)
    lam[nonneg_mask] = np.maximum(g_reduced[nonneg_mask], 0.0)
    stationarity = np.abs(g_reduced - lam).max(initial=0.0)
    complementarity = np.abs(lam * z).max(initial=0.0)
    feas_bounds = max(0.0, -(z[nonneg_mask].min(initial=0.0)))
    return float(max(stationarity, complementarity, feas_eq, feas_bounds))


def solve_qp(p, tol=1e-8, max_iter=100):
    """Solve the QP described by ``p``.

    Free variables are eliminated exactly through a Schur complement when no
    equality constraints are present; the remaining nonnegativity-constrained
    problem runs a projected-gradient warm start followed by active-set
    iterations. Raises ValueError if q is indefinite beyond the PSD
    tolerance; an inconsistent equality system yields status "infeasible".
    """
    q, c = p.q, p.c
    n = p.n
    ref_trace = float(np.trace(q))
    nonneg_mask = np.zeros(n, dtype=bool)
    nonneg_mask[p.nonneg_idx] = True
    free_idx = np.flatnonzero(~nonneg_mask)
    con_idx = np.flatnonzero(nonneg_mask)

    if p.a_eq is not None:
        _check_psd(q, ref_trace)
        z0 = _phase1(p.a_eq, p.b_eq, p.nonneg_idx, n, tol)
        if z0 is None:
            nan = np.full(n, np.nan)
            return QpSolution(nan, np.nan, np.nan, 0, "infeasible", np.empty(0))
        z, iters, trace = _eq_active_set(
            q, c, p.a_eq, p.b_eq, nonneg_mask, z0, tol, max_iter, ref_trace
        )
    elif con_idx.size == 0:
        # Fully unconstrained: one exact linear solve.
        factor, _ = _chol_with_shift(q, ref_trace)
        z = cho_solve(factor, c)
        iters, trace = 1, [_objective(q, c, z)]
    elif free_idx.size == 0:
        _check_psd(q, ref_trace)
        z_ws, trace_ws = _pg_warm_start(q, c)
        z, iters, trace = _nnqp(q, c, z_ws, tol, max_iter, ref_trace)
        trace = trace_ws + trace
        iters += len(trace_ws)
    else:
        # Schur elimination of the free block, then a small nonnegativity QP.
        nf = free_idx.size
        prefix = free_idx[-1] == nf - 1 and con_idx[0] == nf
        if prefix:
            # Free variables occupy a leading block: cheap slice views.
            pf, q_fc, q_cc = q[:nf, :nf], q[:nf, nf:], q[nf:, nf:]
        else:
            pf = q[np.ix_(free_idx, free_idx)]
            q_fc = q[np.ix_(free_idx, con_idx)]
            q_cc = q[np.ix_(con_idx, con_idx)]
        try:
            factor = cho_factor(pf, lower=True, check_finite=False)
        except LinAlgError:
            factor = None
        if factor is None:
            # Free block not positive definite: fall back to treating the
            # whole problem jointly with a trivial equality-free active set.
            _check_psd(q, ref_trace)
            z, iters, trace = _eq_active_set(
                q, c, np.zeros((0, n)), np.zeros(0), nonneg_mask, np.zeros(n),
                tol, max_iter, ref_trace,
            )
        else:
            c_f = c[free_idx]
            pinv = cho_solve(factor, np.column_stack([q_fc, c_f]), check_finite=False)
            pinv_fc, pinv_cf = pinv[:, :-1], pinv[:, -1]
            s = q_cc - q_fc.T @ pinv_fc
            s = 0.5 * (s + s.T)
            _check_psd(s, ref_trace)
            c_red = c[con_idx] - q_fc.T @ pinv_cf
            const = -0.5 * float(c_f @ pinv_cf)
            z_ws, trace_ws = _pg_warm_start(s, c_red)
            z_c, iters, trace = _nnqp(s, c_red, z_ws, tol, max_iter, ref_trace)
            trace = [v + const for v in trace_ws + trace]
            iters += len(trace_ws)
            z = np.empty(n)
            z[con_idx] = z_c
            z[free_idx] = cho_solve(factor, c_f - q_fc @ z_c, check_finite=False)

    resid = kkt_residual(p, z)
    status = "converged" if resid <= tol else "max_iter"
    return QpSolution(
        z=z,
        objective=_objective(q, c, z),
        kkt_residual=resid,
        iterations=iters,
        status=status,
        objective_trace=np.asarray(trace, dtype=float),
    )
