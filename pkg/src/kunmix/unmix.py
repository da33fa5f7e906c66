"""Supervised per-pixel abundance estimation.

Two methods are provided:

* FCLS: fully constrained least squares, argmin ||r - M a||^2 over the
  unit simplex, solved as a QP with Q = M'M and c = M'r.

* SK-Hype: each pixel is modeled as u * a'm_l + (1-u) * psi(m_l) + n_l,
  a u-weighted linear trend plus a kernel-space residual. For fixed u the
  (a, psi) subproblem is solved through its dual QP in (beta, gamma),

      max  -1/2 [beta; gamma]' [[K_u + mu*I, u*M], [u*M', u*I]] [beta; gamma]
           + [r; 0]' [beta; gamma]      s.t. gamma >= 0,

  with K_u = u*M M' + (1-u)*K; the unconstrained beta block is eliminated
  inside the QP solver. The abundance estimate is recovered by normalizing
  M'beta + gamma to sum one, and u is refit from the energy split between
  the linear and kernel parts until it stabilizes.

The u refit uses the stable closed form

    u <- 1 / (1 + ((1-u_prev)/u_prev) * sqrt(beta'K beta / ||M'beta+gamma||^2)),

clamped to (u_min, u_max): the optimal split u/(1-u) equals the ratio of
the two component norms, and this form keeps u inside (0, 1). A "literal"
mode computing 1 + (1-u_prev)*sqrt(...) is kept for auditing; it always
exceeds 1 and is only meaningful clamped.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePixelError
from .kernels import KernelSpec, gram_matrix
from .model import UnmixResult, validate_simplex
from .qp import QpProblem, solve_qp

__all__ = [
    "SkHypeConfig",
    "PixelSolution",
    "skhype_u_update",
    "skhype_unmix_pixel",
    "fcls_unmix_pixel",
    "unmix_scene",
]


@dataclass(frozen=True)
class SkHypeConfig:
    kernel: KernelSpec = field(default_factory=KernelSpec.gaussian)
    mu: float = 1e-2
    u_init: float = 0.5
    u_bounds: tuple[float, float] = (0.01, 0.99)
    outer_tol: float = 1e-4
    max_outer_iter: int = 50
    qp_tol: float = 1e-8
    qp_max_iter: int = 100
    u_update: str = "reciprocal"  # or "literal"

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        lo, hi = self.u_bounds
        if not (0.0 < lo < hi < 1.0):
            raise ValueError(f"u_bounds must satisfy 0 < lo < hi < 1, got {self.u_bounds}")
        if not (0.0 < self.u_init < 1.0):
            raise ValueError(f"u_init must lie in (0, 1), got {self.u_init}")
        if self.u_update not in ("reciprocal", "literal"):
            raise ValueError(f"unknown u_update mode {self.u_update!r}")

    def to_dict(self):
        return {
            "kernel": self.kernel.to_config(),
            "mu": self.mu,
            "u_init": self.u_init,
            "u_bounds": list(self.u_bounds),
            "outer_tol": self.outer_tol,
            "max_outer_iter": self.max_outer_iter,
            "qp_tol": self.qp_tol,
            "qp_max_iter": self.qp_max_iter,
            "u_update": self.u_update,
        }

    @classmethod
    def from_dict(cls, d):
        known = {
            "kernel", "mu", "u_init", "u_bounds", "outer_tol",
            "max_outer_iter", "qp_tol", "qp_max_iter", "u_update",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown skhype config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "kernel" in kwargs:
            kwargs["kernel"] = KernelSpec.from_config(kwargs["kernel"])
        if "u_bounds" in kwargs:
            kwargs["u_bounds"] = tuple(kwargs["u_bounds"])
        return cls(**kwargs)


@dataclass(frozen=True)
class PixelSolution:
    """Converged per-pixel state: abundances, mixing weight, dual variables,
    residuals e = mu * beta, and the dual objective trace of each inner QP
    solve (one array per outer iteration, each non-decreasing)."""

    alpha: np.ndarray
    u: float
    beta: np.ndarray
    gamma: np.ndarray
    residuals: np.ndarray
    dual_objective_trace: tuple[np.ndarray, ...]
    iterations: int

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "residuals"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.gamma.min(initial=0.0) < -1e-8:
            raise ValueError(f"gamma has negative entries: min {self.gamma.min()}")
        if not validate_simplex(self.alpha, 1e-6):
            raise ValueError("recovered abundances violate simplex constraints")
        object.__setattr__(
            self,
            "dual_objective_trace",
            tuple(np.asarray(t, dtype=float) for t in self.dual_objective_trace),
        )


def _u_update(beta, gamma, m_data, gram, u_prev, u_bounds, mode):
    num = float(beta @ (gram @ beta))
    num = max(num, 0.0)
    v = m_data.T @ beta + gamma
    den = float(v @ v)
    if not den > 0.0:
        raise DegeneratePixelError("u update: ||M'beta + gamma||^2 is zero")
    root = np.sqrt(num / den)
    if mode == "literal":
        u = 1.0 + (1.0 - u_prev) * root
    else:
        u = 1.0 / (1.0 + (1.0 - u_prev) / u_prev * root)
    return float(min(max(u, u_bounds[0]), u_bounds[1]))


def skhype_u_update(beta, gamma, m, gram, u_prev, u_bounds=(0.01, 0.99), mode="reciprocal"):
    """Refit the linear-mixing weight u from the current dual solution."""
    return _u_update(
        np.asarray(beta, dtype=float),
        np.asarray(gamma, dtype=float),
        m.data,
        np.asarray(gram, dtype=float),
        u_prev,
        u_bounds,
        mode,
    )


class _SkHypeWorkspace:
    """Per-thread scratch space for the dual problem of one pixel.

    The (L+R)^2 block matrix is rebuilt in place every outer iteration;
    only the K_u block and the u scale factors change with u, so the
    difference M M' - K is precomputed once per scene.
    """

    def __init__(self, m_data, gram, cfg):
        self.m_data = m_data
        self.gram = gram
        self.cfg = cfg
        l, n_em = m_data.shape
        mmt = m_data @ m_data.T
        mmt = 0.5 * (mmt + mmt.T)
        self.diff = mmt - gram
        self.h = np.zeros((l + n_em, l + n_em))
        self.c = np.zeros(l + n_em)
        self.nonneg = np.arange(l, l + n_em, dtype=np.intp)
        self.band_diag = np.arange(l)
        self.em_diag = np.arange(l, l + n_em)

    def solve(self, r):
        cfg = self.cfg
        m_data, gram, diff, h = self.m_data, self.gram, self.diff, self.h
        l, n_em = m_data.shape
        self.c[:l] = r
        u = cfg.u_init
        traces = []
        beta = gamma = None
        u_solved = u
        iterations = 0
        for _ in range(cfg.max_outer_iter):
            iterations += 1
            u_solved = u
            hb = h[:l, :l]
            np.multiply(diff, u, out=hb)          # K_u = u*MM' + (1-u)*K
            hb += gram
            hb[self.band_diag, self.band_diag] += cfg.mu
            np.multiply(m_data, u, out=h[:l, l:])
            h[l:, :l] = h[:l, l:].T
            h[l:, l:] = 0.0
            h[self.em_diag, self.em_diag] = u
            sol = solve_qp(
                QpProblem(h, self.c, self.nonneg, trusted=True),
                tol=cfg.qp_tol,
                max_iter=cfg.qp_max_iter,
            )
            beta = sol.z[:l]
            gamma = sol.z[l:]
            traces.append(-sol.objective_trace)  # dual objective = -minimized value
            u_next = _u_update(beta, gamma, m_data, gram, u, cfg.u_bounds, cfg.u_update)
            if abs(u_next - u) <= cfg.outer_tol:
                break
            u = u_next
        v = m_data.T @ beta + gamma
        total = float(v.sum())
        if total <= 1e-12:
            raise DegeneratePixelError(
                f"abundance normalization denominator {total:.3e} is not positive"
            )
        return PixelSolution(
            alpha=v / total,
            u=u_solved,
            beta=beta,
            gamma=gamma,
            residuals=cfg.mu * beta,
            dual_objective_trace=tuple(traces),
            iterations=iterations,
        )


def skhype_unmix_pixel(r, m, gram, cfg=None):
    """Unmix one pixel with SK-Hype given the Gram matrix over M's rows.

    Raises DegeneratePixelError if the abundance normalization degenerates;
    scene-level unmixing falls back to FCLS for such pixels.
    """
    cfg = cfg or SkHypeConfig()
    r = np.asarray(r, dtype=float)
    if r.shape != (m.n_bands,):
        raise ValueError(f"pixel has shape {r.shape}, expected ({m.n_bands},)")
    gram = np.asarray(gram, dtype=float)
    if gram.shape != (m.n_bands, m.n_bands):
        raise ValueError("gram matrix shape does not match the band count")
    return _SkHypeWorkspace(m.data, gram, cfg).solve(r)


# Below this band count the per-pixel LAPACK calls are overhead-bound, so
# scene unmixing batches each sweep's linear solves across pixels instead;
# above it the per-pixel Cholesky path is compute-bound and cheaper (the
# batched solve pays twice the factorization flops).
_BATCH_BAND_LIMIT = 64


def _skhype_scene_batched(pixels, lo, hi, m_data, gram, cfg):
    """SK-Hype over pixels [lo, hi) with per-sweep batched linear algebra.

    Runs exactly the per-pixel alternation: every pixel keeps its own u
    trajectory and converges on its own sweep; only the L x L factorizations
    are grouped. Pixels whose reduced dual develops an active set get their
    gamma from the QP solver one by one (the zero solution is certified by
    the same optimality threshold the active set uses). Returns
    (alphas, u_values, iterations, degenerate_mask) for the slice.
    """
    l, n_em = m_data.shape
    mmt = m_data @ m_data.T
    mmt = 0.5 * (mmt + mmt.T)
    diff = mmt - gram
    count = hi - lo
    r_all = np.ascontiguousarray(pixels[:, lo:hi].T)

    u = np.full(count, cfg.u_init)
    beta = np.zeros((count, l))
    gamma = np.zeros((count, n_em))
    u_out = np.empty(count)
    iters = np.zeros(count, dtype=np.intp)
    degenerate = np.zeros(count, dtype=bool)
    nonneg = np.arange(n_em, dtype=np.intp)
    band_diag = np.arange(l)
    em_diag = np.arange(n_em)
    u_lo, u_hi = cfg.u_bounds

    active = np.arange(count)
    for sweep in range(1, cfg.max_outer_iter + 1):
        na = active.size
        ua = u[active]
        p = diff[None, :, :] * ua[:, None, None]
        p += gram[None, :, :]
        p[:, band_diag, band_diag] += cfg.mu
        rhs = np.empty((na, l, n_em + 1))
        rhs[:, :, :n_em] = m_data[None, :, :]
        rhs[:, :, n_em] = r_all[active]
        sol = np.linalg.solve(p, rhs)
        pinv_m = sol[:, :, :n_em]
        pinv_r = sol[:, :, n_em]
        s = np.einsum("lr,nlk->nrk", m_data, pinv_m)
        s *= -(ua**2)[:, None, None]
        s[:, em_diag, em_diag] += ua[:, None]
        c_red = -ua[:, None] * np.einsum("lr,nl->nr", m_data, pinv_r)
        ga = np.zeros((na, n_em))
        ba = pinv_r.copy()
        # gamma = 0 is optimal unless some dual coordinate wants to grow.
        for i in np.flatnonzero(c_red.max(axis=1) > cfg.qp_tol):
            s_i = 0.5 * (s[i] + s[i].T)
            qsol = solve_qp(
                QpProblem(s_i, c_red[i], nonneg, trusted=True),
                tol=cfg.qp_tol,
                max_iter=cfg.qp_max_iter,
            )
            ga[i] = qsol.z
            ba[i] -= ua[i] * (pinv_m[i] @ ga[i])
        # u refit, batched
        num = np.maximum(np.einsum("nl,nl->n", ba @ gram, ba), 0.0)
        v = ba @ m_data + ga
        den = np.einsum("nr,nr->n", v, v)
        bad = ~(den > 0.0)
        root = np.sqrt(num / np.where(bad, 1.0, den))
        if cfg.u_update == "literal":
            u_next = 1.0 + (1.0 - ua) * root
        else:
            u_next = 1.0 / (1.0 + (1.0 - ua) / ua * root)
        np.clip(u_next, u_lo, u_hi, out=u_next)
        iters[active] = sweep
        done = (np.abs(u_next - ua) <= cfg.outer_tol) | bad
        if sweep == cfg.max_outer_iter:
            done[:] = True
        fin = np.flatnonzero(done)
        sel = active[fin]
        beta[sel] = ba[fin]
        gamma[sel] = ga[fin]
        u_out[sel] = ua[fin]
        degenerate[sel] = bad[fin]
        keep = np.flatnonzero(~done)
        u[active[keep]] = u_next[keep]
        active = active[keep]
        if active.size == 0:
            break

    v_all = beta @ m_data + gamma
    totals = v_all.sum(axis=1)
    degenerate |= totals <= 1e-12
    safe = np.where(degenerate, 1.0, totals)
    alphas = (v_all / safe[:, None]).T
    u_out[degenerate] = np.nan
    return alphas, u_out, iters, degenerate


def _fcls_setup(m_data):
    n_em = m_data.shape[1]
    q = m_data.T @ m_data
    q = 0.5 * (q + q.T)
    a_eq = np.ones((1, n_em))
    b_eq = np.ones(1)
    nonneg = np.arange(n_em)
    return q, a_eq, b_eq, nonneg


def _fcls_pixel(r, m_data, setup, qp_tol, qp_max_iter):
    q, a_eq, b_eq, nonneg = setup
    sol = solve_qp(
        QpProblem(q, m_data.T @ r, nonneg, a_eq, b_eq),
        tol=qp_tol,
        max_iter=qp_max_iter,
    )
    if sol.status == "infeasible":
        raise RuntimeError("FCLS QP reported an infeasible simplex (should not happen)")
    return sol.z, sol.iterations


def fcls_unmix_pixel(r, m, qp_tol=1e-8, qp_max_iter=100):
    """Fully constrained least squares for one pixel: returns the length-R
    abundance vector minimizing ||r - M a||^2 on the unit simplex."""
    r = np.asarray(r, dtype=float)
    if r.shape != (m.n_bands,):
        raise ValueError(f"pixel has shape {r.shape}, expected ({m.n_bands},)")
    return _fcls_pixel(r, m.data, _fcls_setup(m.data), qp_tol, qp_max_iter)[0]


def unmix_scene(scene, m, method, cfg=None, workers=1):
    """Unmix every pixel of a scene; returns an UnmixResult.

    ``method`` is "fcls" or "skhype". Pixels where the SK-Hype recovery
    degenerates fall back to FCLS and are flagged in ``fallback_mask``
    (with u recorded as NaN). Results are independent of ``workers``: each
    pixel is solved by the same pure function and merged by index.
    """
    if scene.n_bands != m.n_bands:
        raise ValueError(
            f"scene has {scene.n_bands} bands but endmember matrix has {m.n_bands}"
        )
    method = method.lower()
    if method not in ("fcls", "skhype"):
        raise ValueError(f"unknown method {method!r}")
    cfg = cfg or SkHypeConfig()
    pixels = scene.pixels
    n = scene.n_pixels
    m_data = m.data

    start = time.perf_counter()
    fcls_setup = _fcls_setup(m_data)
    if method == "skhype":
        gram = gram_matrix(cfg.kernel, m_data)

    abundances = np.empty((m.n_endmembers, n))
    u_values = np.full(n, np.nan)
    iterations = np.zeros(n, dtype=np.intp)
    fallback = np.zeros(n, dtype=bool)

    def fcls_fill(j):
        alpha, iters = _fcls_pixel(
            pixels[:, j], m_data, fcls_setup, cfg.qp_tol, cfg.qp_max_iter
        )
        abundances[:, j] = alpha
        iterations[j] = iters

    def solve_range(lo, hi):
        if method == "fcls":
            for j in range(lo, hi):
                fcls_fill(j)
            return
        if m.n_bands <= _BATCH_BAND_LIMIT:
            # Blocked to bound the (block, L, L) workspace. Block boundaries
            # are fixed by the band count alone: batch composition must not
            # depend on the worker count, because BLAS reductions over a
            # batch are not bit-reproducible across shapes.
            block = max(64, 4_000_000 // (m.n_bands * m.n_bands))
            for bs in range(lo, hi, block):
                be = min(bs + block, hi)
                al, uo, it, bad = _skhype_scene_batched(pixels, bs, be, m_data, gram, cfg)
                abundances[:, bs:be] = al
                u_values[bs:be] = uo
                iterations[bs:be] = it
                fallback[bs:be] = bad
                for j in np.flatnonzero(bad):
                    fcls_fill(bs + j)
            return
        ws = _SkHypeWorkspace(m_data, gram, cfg)
        for j in range(lo, hi):
            try:
                px = ws.solve(pixels[:, j])
                abundances[:, j] = px.alpha
                u_values[j] = px.u
                iterations[j] = px.iterations
            except DegeneratePixelError:
                fcls_fill(j)
                fallback[j] = True

    batched = method == "skhype" and m.n_bands <= _BATCH_BAND_LIMIT
    if workers <= 1 or n < 2 or batched:
        # The batched engine is already vectorized across pixels; worker
        # threads would only reshuffle batch boundaries.
        solve_range(0, n)
    else:
        bounds = np.linspace(0, n, workers + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for fut in [
                pool.submit(solve_range, int(lo), int(hi))
                for lo, hi in zip(bounds[:-1], bounds[1:])
            ]:
                fut.result()
    wall = time.perf_counter() - start

    return UnmixResult(
        abundances=abundances,
        u_values=u_values,
        iterations=iterations,
        wall_time=wall,
        method=method,
        fallback_mask=fallback if method == "skhype" else None,
    )
