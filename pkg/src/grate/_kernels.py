"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``GRATE_DISABLE_NUMBA`` is unset
(or ``0``).  Both paths run the same algorithms; the masked Gram kernel gathers each
column's observed rows under numba and uses one masked GEMM under numpy.

``GRATE_THREADS`` caps numba's thread pool (``0`` or unset means automatic).
"""
import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

__all__ = ["active", "numpy_kernels", "numba_kernels", "USE_NUMBA", "backend_name"]

_DISABLED = os.environ.get("GRATE_DISABLE_NUMBA", "").strip() not in ("", "0")
USE_NUMBA = numba is not None and not _DISABLED

if numba is not None:
    # tbb first would warn on older system TBB builds
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def _lawson_hanson(B, d, init, thresh, max_iter):
    """Active-set NNLS: min ||B x - d|| s.t. x >= 0.

    ``init`` is a boolean warm-start guess of the passive set (length 0 for a
    cold start).  Terminates when no inactive coordinate has gradient
    ``B^T (d - B x)`` above ``thresh``.  Returns ``(x, iterations, status)``;
    status 1 means the iteration cap was hit and ``x`` is the last feasible
    iterate.
    """
    n = B.shape[1]
    x = np.zeros(n)
    passive = np.zeros(n, dtype=np.bool_)
    if init.shape[0] == n:
        passive[:] = init

    # shrink the warm-start set until its LS solution is strictly positive
    while passive.any():
        idx = np.nonzero(passive)[0]
        z = np.linalg.lstsq(B[:, idx], d, rcond=-1.0)[0]
        if (z > 0.0).all():
            x[idx] = z
            break
        passive[idx[z <= 0.0]] = False

    it = 0
    status = 0
    w = B.T @ (d - B @ x)
    while True:
        cand = np.where(passive, -np.inf, w)
        j = np.argmax(cand)
        if cand[j] <= thresh:
            break
        if it >= max_iter:
            status = 1
            break
        passive[j] = True
        first = True
        accepted = True
        while True:
            it += 1
            idx = np.nonzero(passive)[0]
            z = np.linalg.lstsq(B[:, idx], d, rcond=-1.0)[0]
            neg = z <= 0.0
            if not neg.any():
                x[:] = 0.0
                x[idx] = z
                break
            if first and z[np.searchsorted(idx, j)] <= 0.0:
                # entering coordinate cannot move off its bound: roundoff in w
                passive[j] = False
                w[j] = 0.0
                accepted = False
                break
            first = False
            xp = x[idx]
            ratio = np.where(neg, xp / np.where(neg, xp - z, 1.0), np.inf)
            q = np.argmin(ratio)
            alpha = ratio[q]
            xp = xp + alpha * (z - xp)
            xp[q] = 0.0
            x[idx] = xp
            drop = xp <= 0.0
            passive[idx[drop]] = False
            x[idx[drop]] = 0.0
            if it >= max_iter:
                status = 1
                break
        if status == 1:
            break
        if accepted:
            w = B.T @ (d - B @ x)
    return x, it, status


def _masked_gram_gather(K, Y, W):
    """Per column: gather the observed rows of ``K`` and form their Gram matrix with BLAS."""
    k = K.shape[1]
    p = Y.shape[1]
    H = np.zeros((p, k, k))
    g = np.zeros((p, k))
    counts = np.zeros(p, dtype=np.int64)
    for j in prange(p):
        idx = np.nonzero(W[:, j])[0]
        counts[j] = idx.shape[0]
        if idx.shape[0] == 0:
            continue
        Kj = np.ascontiguousarray(K[idx])
        H[j] = Kj.T @ Kj
        g[j] = Kj.T @ np.ascontiguousarray(Y[idx, j])
    return H, g, counts


def _masked_gram_numpy(K, Y, W):
    """Per-column Gram matrices ``K_j^T K_j`` and ``K_j^T y_j`` over masked rows."""
    m, k = K.shape
    Wf = W.astype(np.float64)
    KK = (K[:, :, None] * K[:, None, :]).reshape(m, k * k)
    H = (Wf.T @ KK).reshape(-1, k, k)
    g = (Wf * Y).T @ K
    counts = W.sum(axis=0).astype(np.int64)
    return H, g, counts


numpy_kernels = SimpleNamespace(
    name="numpy",
    lawson_hanson=_lawson_hanson,
    masked_gram=_masked_gram_numpy,
)

if numba is not None:
    try:
        _threads = int(os.environ.get("GRATE_THREADS", "0") or 0)
    except ValueError:
        _threads = 0
    if _threads > 0:
        numba.set_num_threads(min(_threads, numba.config.NUMBA_NUM_THREADS))
    numba_kernels = SimpleNamespace(
        name="numba",
        lawson_hanson=numba.njit(cache=True)(_lawson_hanson),
        masked_gram=numba.njit(cache=True, parallel=True)(_masked_gram_gather),
    )
else:  # pragma: no cover
    numba_kernels = None

active = numba_kernels if USE_NUMBA else numpy_kernels


def backend_name():
    return active.name
