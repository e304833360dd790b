"""Constrained least-squares kernels for the ALS block updates.

Every subproblem here is a strictly convex QP over a polyhedral cone,

    min_x  1/2 x^T H x - g^T x   s.t.  A x <= 0,  (x >= 0 optionally),

with ``H = M^T M`` and ``g = M^T y`` built from the observed rows only.
Because the right-hand side of every constraint is zero, ``x = 0`` is always
feasible.  The QP is solved through its dual, which is an NNLS problem in the
constraint multipliers (``B = L^{-1} A^T``, ``d = L^{-1} g`` with
``H = L L^T``), using the warm-startable Lawson-Hanson active-set kernel.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import _kernels
from .errors import ConvergenceError, DimensionError, SingularityError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500
RIDGE_FACTOR = 1e-10
COND_LIMIT = 1e12
ROUNDOFF_FLOOR = 64 * np.finfo(float).eps


@dataclass
class QpSolution:
    x: np.ndarray
    # multipliers of the rows of A, then of the bounds -x <= 0 when nonneg
    multipliers: np.ndarray
    active: np.ndarray
    iterations: int = 0
    ridged: bool = False
    empty: bool = False


@dataclass
class LsSolution:
    """Column-wise solution ``x`` of shape ``(k, p)`` plus per-column diagnostics."""

    x: np.ndarray
    columns: List[QpSolution] = field(default_factory=list)

    @property
    def ridged(self) -> np.ndarray:
        return np.array([c.ridged for c in self.columns], dtype=bool)

    @property
    def empty(self) -> np.ndarray:
        return np.array([c.empty for c in self.columns], dtype=bool)

    @property
    def active(self):
        return [c.active for c in self.columns]


@dataclass
class LsProblem:
    """Independent masked LS solves sharing one design matrix.

    Column ``j`` of ``targets`` is fitted using the rows of ``design`` where
    ``target_mask[:, j]`` is set.  ``constraints`` (``c x k``) imposes
    ``constraints @ x <= 0`` on every solution column.
    """

    design: np.ndarray
    targets: np.ndarray
    target_mask: Optional[np.ndarray] = None
    constraints: Optional[np.ndarray] = None
    nonneg: bool = False
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.design.ndim != 2 or self.targets.shape[0] != self.design.shape[0]:
            raise DimensionError(
                f"design {self.design.shape} and targets {self.targets.shape} are inconsistent"
            )
        if self.target_mask is None:
            self.target_mask = np.ones(self.targets.shape, dtype=bool)
        else:
            self.target_mask = np.asarray(self.target_mask, dtype=bool)
            if self.target_mask.ndim == 1:
                self.target_mask = self.target_mask[:, None]
            if self.target_mask.shape != self.targets.shape:
                raise DimensionError("target_mask must match targets")
        if self.constraints is not None:
            self.constraints = np.atleast_2d(np.asarray(self.constraints, dtype=np.float64))
            if self.constraints.shape[1] != self.design.shape[1]:
                raise DimensionError("constraint matrix needs one column per unknown")
        if not self.tol > 0:
            raise DimensionError("tol must be positive")

    def gram(self, kernels=None):
        kernels = kernels or _kernels.active
        y = np.where(self.target_mask, self.targets, 0.0)
        return kernels.masked_gram(np.ascontiguousarray(self.design), y,
                                   np.ascontiguousarray(self.target_mask))


@dataclass
class CoupledQp:
    """Joint update of all rows of the augmented first factor.

    ``hessians[i]``/``rhs[i]`` are the masked Gram matrix and right-hand side
    of row ``i`` (the last row is the aggregate slab), ``coupling`` is
    ``khatri_rao(A2, ..., AN)`` and ``selector`` is ``e = e_b - e_s``.
    """

    hessians: np.ndarray
    rhs: np.ndarray
    counts: np.ndarray
    coupling: np.ndarray
    selector: np.ndarray

    def __post_init__(self):
        n, k = self.rhs.shape
        if self.hessians.shape != (n, k, k) or self.counts.shape != (n,):
            raise DimensionError("per-row Gram data are inconsistent")
        if self.coupling.ndim != 2 or self.coupling.shape[1] != k:
            raise DimensionError("coupling matrix needs one column per rank component")
        if self.selector.shape != (n,):
            raise DimensionError("selector length must equal the number of rows")


def stabilize(H, ridge=True, column=None):
    """Return ``(H', ridged)``; adds ``1e-10 * trace(H)/k`` when H is numerically singular."""
    k = H.shape[0]
    ev = np.linalg.eigvalsh(H)
    if ev[0] > ev[-1] / COND_LIMIT:
        return H, False
    if not ridge:
        raise SingularityError(f"rank-deficient least-squares system (column {column})", column)
    lam = RIDGE_FACTOR * np.trace(H) / k
    return H + lam * np.eye(k), True


def _is_empty(H, count):
    return count == 0 or not np.trace(H) > 0


def solve_cone_qp(H, g, A=None, nonneg=False, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                  warm=None, ridge=True, kernels=None, column=None, check=True) -> QpSolution:
    """Minimize ``1/2 x'Hx - g'x`` subject to ``A x <= 0`` and optionally ``x >= 0``.

    ``check=False`` skips the conditioning test for callers that already
    stabilized ``H`` block by block.

    Termination: no constraint has ``a_i x / ||a_i||`` above ``tol * ||H^{-1} g||``
    (or the roundoff floor of the dual gradient, if larger).
    """
    kernels = kernels or _kernels.active
    H = np.asarray(H, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    k = g.shape[0]
    n_rows = 0 if A is None else A.shape[0]
    n_all = n_rows + (k if nonneg else 0)
    ridged = False
    if check:
        H, ridged = stabilize(H, ridge, column)
    L = np.linalg.cholesky(H)
    if n_all == 0:
        x = cho_solve((L, True), g)
        return QpSolution(x, np.zeros(0), np.zeros(0, dtype=bool), 0, ridged)

    rows = []
    scale = np.ones(n_all)
    if n_rows:
        norms = np.linalg.norm(A, axis=1)
        scale[:n_rows] = np.where(norms > 0, norms, 1.0)
        rows.append(A / scale[:n_rows, None])
    if nonneg:
        rows.append(-np.eye(k))
    An = np.vstack(rows)
    B = solve_triangular(L, An.T, lower=True)
    d = solve_triangular(L, g, lower=True)
    # B^T (d - B lam) is the normalized primal constraint value A x / ||a_i||, so
    # compare it with the unconstrained solution's size, floored at roundoff
    x_free = solve_triangular(L.T, d, lower=False)
    floor = ROUNDOFF_FLOOR * float(np.max(np.linalg.norm(B, axis=0))) * float(np.linalg.norm(d))
    thresh = max(tol * float(np.linalg.norm(x_free)), floor)
    init = np.zeros(0, dtype=bool)
    if warm is not None and len(warm) == n_all:
        init = np.asarray(warm, dtype=bool)
    lam, it, status = kernels.lawson_hanson(np.ascontiguousarray(B), d, init, thresh, max_iter)
    x = solve_triangular(L.T, d - B @ lam, lower=False)
    if nonneg:
        x = np.maximum(x, 0.0)
    sol = QpSolution(x, lam / scale, lam > 0, int(it), ridged)
    if status != 0:
        raise ConvergenceError(
            f"active-set QP hit its iteration cap ({max_iter})", best=sol,
            context={"column": column},
        )
    return sol


def solve_gram_columns(H, g, counts, constraints=None, nonneg=False, tol=DEFAULT_TOL,
                       max_iter=DEFAULT_MAX_ITER, warm=None, ridge=True, kernels=None) -> LsSolution:
    """Solve one QP per column from stacked Gram data ``H (p,k,k)``, ``g (p,k)``.

    Columns with no observed rows get a zero solution and are flagged empty.
    """
    p, k = g.shape
    x = np.zeros((k, p))
    cols = []
    plain = constraints is None and not nonneg
    n_all = (0 if constraints is None else constraints.shape[0]) + (k if nonneg else 0)
    empty_sol = lambda: QpSolution(np.zeros(k), np.zeros(n_all), np.zeros(n_all, dtype=bool),
                                   empty=True)
    if plain:
        return _solve_plain_columns(H, g, counts, ridge)
    for j in range(p):
        if _is_empty(H[j], counts[j]):
            cols.append(empty_sol())
            continue
        w = None if warm is None else warm[j]
        sol = solve_cone_qp(H[j], g[j], constraints, nonneg, tol, max_iter, w, ridge,
                            kernels, column=j)
        x[:, j] = sol.x
        cols.append(sol)
    out = LsSolution(x, cols)
    _warn_ridge(out.ridged.sum())
    return out


def _warn_ridge(n):
    if n:
        log.warning("ridge fallback engaged in %d rank-deficient solve(s)", int(n))


def _solve_plain_columns(H, g, counts, ridge):
    p, k = g.shape
    x = np.zeros((k, p))
    cols = []
    empty = np.array([_is_empty(H[j], counts[j]) for j in range(p)], dtype=bool)
    live = np.flatnonzero(~empty)
    ridged = np.zeros(p, dtype=bool)
    if live.size:
        Hl = H[live].copy()
        ev = np.linalg.eigvalsh(Hl)
        bad = ev[:, 0] <= ev[:, -1] / COND_LIMIT
        if bad.any():
            if not ridge:
                j = int(live[np.flatnonzero(bad)[0]])
                raise SingularityError(f"rank-deficient least-squares system (column {j})", j)
            lam = RIDGE_FACTOR * np.trace(Hl[bad], axis1=1, axis2=2) / k
            Hl[bad] += lam[:, None, None] * np.eye(k)
            ridged[live[bad]] = True
            _warn_ridge(bad.sum())
        x[:, live] = np.linalg.solve(Hl, g[live][:, :, None])[:, :, 0].T
    for j in range(p):
        cols.append(QpSolution(x[:, j], np.zeros(0), np.zeros(0, dtype=bool), 0,
                               bool(ridged[j]), bool(empty[j])))
    return LsSolution(x, cols)


def masked_ls(problem: LsProblem, ridge=True, kernels=None) -> LsSolution:
    """Unconstrained masked LS, one solve per target column."""
    if problem.constraints is not None or problem.nonneg:
        raise DimensionError("masked_ls takes no constraints; use halfspace_ls")
    H, g, counts = problem.gram(kernels)
    return _solve_plain_columns(H, g, counts, ridge)


def halfspace_ls(problem: LsProblem, warm=None, max_iter=DEFAULT_MAX_ITER, ridge=True,
                 kernels=None) -> LsSolution:
    """Masked LS with the shared halfspace constraints ``C x <= 0`` per column."""
    H, g, counts = problem.gram(kernels)
    return solve_gram_columns(H, g, counts, problem.constraints, problem.nonneg, problem.tol,
                              max_iter, warm, ridge, kernels)


def nnls(design, target, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, kernels=None) -> np.ndarray:
    """``argmin_{x >= 0} ||M x - y||``, Lawson-Hanson on the design matrix directly.

    The gradient threshold is ``tol * max_j ||M_j|| * ||y||``.
    """
    kernels = kernels or _kernels.active
    M = np.ascontiguousarray(np.asarray(design, dtype=np.float64))
    y = np.asarray(target, dtype=np.float64).ravel()
    if M.ndim != 2 or M.shape[0] != y.shape[0]:
        raise DimensionError(f"design {M.shape} and target {y.shape} are inconsistent")
    thresh = tol * float(np.max(np.linalg.norm(M, axis=0), initial=0.0)) * float(np.linalg.norm(y))
    x, _, status = kernels.lawson_hanson(M, y, np.zeros(0, dtype=bool), thresh, max_iter)
    if status != 0:
        raise ConvergenceError(f"NNLS hit its iteration cap ({max_iter})", best=x)
    return x


def _row_blocks(hessians, counts, ridge):
    """Stabilize each row's Gram block; returns (blocks, free rows, ridged flags)."""
    free = np.array([not _is_empty(hessians[i], counts[i]) for i in range(len(counts))])
    blocks = []
    ridged = np.zeros(len(counts), dtype=bool)
    for i in np.flatnonzero(free):
        h, ridged[i] = stabilize(hessians[i], ridge, column=int(i))
        blocks.append(h)
    return blocks, free, ridged


def _block_diag(blocks):
    k = blocks[0].shape[0]
    out = np.zeros((k * len(blocks), k * len(blocks)))
    for t, b in enumerate(blocks):
        out[t * k:(t + 1) * k, t * k:(t + 1) * k] = b
    return out


def coupled_a1_qp(problem: CoupledQp, nonneg=False, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                  warm=None, ridge=True, kernels=None) -> QpSolution:
    """Update the augmented first factor under ``G A1^T e <= 0`` (elementwise).

    Rows of A1 with no observed entries are held at zero.  The returned
    ``x`` is the full ``(I1+1, R)`` factor.
    """
    n, k = problem.rhs.shape
    blocks, free, ridged = _row_blocks(problem.hessians, problem.counts, ridge)
    a1 = np.zeros((n, k))
    if not free.any():
        return QpSolution(a1, np.zeros(0), np.zeros(0, dtype=bool), empty=True)
    H = _block_diag(blocks)
    g = problem.rhs[free].ravel()
    A = np.kron(problem.selector[free][None, :], problem.coupling)
    sol = solve_cone_qp(H, g, A, nonneg, tol, max_iter, warm, kernels=kernels, check=False)
    a1[free] = sol.x.reshape(-1, k)
    sol.x = a1
    sol.ridged = bool(ridged.any())
    _warn_ridge(ridged.sum())
    return sol


def exact_a1_ls(hessians, rhs, counts, nonneg=False, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                warm=None, ridge=True, kernels=None) -> QpSolution:
    """Masked LS for A1 restricted to ``A1[-1] == A1[:-1].sum(0)``.

    The free variables are the detailed rows; the aggregate row is their sum,
    so the equality residual is zero by construction.  Detailed rows with no
    observed entries are held at zero.
    """
    hessians = np.asarray(hessians, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    n, k = rhs.shape
    det_free = np.array([not _is_empty(hessians[i], counts[i]) for i in range(n - 1)])
    a1 = np.zeros((n, k))
    nf = int(det_free.sum())
    if nf == 0:
        return QpSolution(a1, np.zeros(0), np.zeros(0, dtype=bool), empty=True)
    Hs, gs = hessians[-1], rhs[-1]
    H = _block_diag([hessians[i] for i in np.flatnonzero(det_free)])
    H += np.kron(np.ones((nf, nf)), Hs)
    g = (rhs[:-1][det_free] + gs).ravel()
    sol = solve_cone_qp(H, g, None, nonneg, tol, max_iter, warm, ridge, kernels)
    a1[:-1][det_free] = sol.x.reshape(nf, k)
    a1[-1] = a1[:-1].sum(axis=0)
    sol.x = a1
    _warn_ridge(sol.ridged)
    return sol


def kkt_residuals(H, g, x, A=None, multipliers=None, nonneg=False):
    """Scale-free KKT residuals of ``min 1/2 x'Hx - g'x s.t. A x <= 0 (, x >= 0)``.

    ``multipliers`` are ordered like :class:`QpSolution` (rows of A, then
    bounds).  Lengths are measured against ``xs = max(||x||, ||H^{-1} g||)``
    and forces against ``||g||``.
    """
    H = np.asarray(H, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    k = g.shape[0]
    rows = []
    if A is not None and len(A):
        rows.append(np.asarray(A, dtype=np.float64))
    if nonneg:
        rows.append(-np.eye(k))
    An = np.vstack(rows) if rows else np.zeros((0, k))
    lam = np.zeros(An.shape[0]) if multipliers is None else np.asarray(multipliers, dtype=np.float64)
    norms = np.linalg.norm(An, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    gnorm = max(float(np.linalg.norm(g)), np.finfo(float).tiny)
    xs = max(float(np.linalg.norm(x)), float(np.linalg.norm(np.linalg.lstsq(H, g, rcond=None)[0])),
             np.finfo(float).tiny)
    ax = An @ x
    return {
        "stationarity": float(np.linalg.norm(H @ x - g + An.T @ lam)) / gnorm,
        "primal": float(np.max(ax / safe, initial=0.0)) / xs,
        "dual": float(np.max(-lam * norms, initial=0.0)) / gnorm,
        "complementarity": float(np.max(np.abs(lam * ax), initial=0.0)) / (gnorm * xs),
    }
