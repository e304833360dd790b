"""Dense tensor algebra: unfoldings, Khatri-Rao products and CPD synthesis.

Tensors are plain ``numpy.ndarray`` objects in C order, so the first mode
varies slowest in the flat storage.  Masks are boolean arrays of the same
shape (``True`` = observed).  Mode indices are 0-based.

Unfolding convention: ``mode_n_unfold(X, n)`` has one column per index of
mode ``n`` and one row per multi-index of the remaining modes, taken in
ascending mode order with the earliest mode varying slowest.  With this
convention the identity

    mode_n_unfold(cpd_reconstruct(model), n)
        == khatri_rao(factors[:n] + factors[n+1:]) @ factors[n].T

holds verbatim.
"""
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence

import numpy as np

from .errors import CapabilityError, DimensionError, DomainError

MAX_MODES = 4
KRUSKAL_MAX_COLUMNS = 12
RANK_EPS = 1e-12


def as_tensor(values, shape=None) -> np.ndarray:
    """Validate and return a float64 tensor with 1 to 4 modes and finite entries."""
    t = np.asarray(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if t.size != int(np.prod(shape)):
            raise DimensionError(f"{t.size} values do not fill shape {shape}")
        t = t.reshape(shape)
    if not 1 <= t.ndim <= MAX_MODES:
        raise DimensionError(f"tensors must have 1 to {MAX_MODES} modes, got {t.ndim}")
    if any(s < 1 for s in t.shape):
        raise DimensionError(f"mode sizes must be positive, got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise DomainError("tensor entries must be finite")
    return t


def as_mask(mask, shape) -> np.ndarray:
    """Boolean observation mask of ``shape``; ``None`` means fully observed."""
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape):
        raise DimensionError(f"mask shape {m.shape} does not match tensor shape {tuple(shape)}")
    return m


@dataclass
class FactorModel:
    """Rank-R CPD model ``[[A_1, ..., A_N]]``.

    For a compound tensor the first factor has ``I1 + 1`` rows, the last of
    which is the latent profile of the aggregate slab.
    """

    factors: List[np.ndarray]
    nonneg: bool = False
    rank: int = field(init=False)

    def __post_init__(self):
        if not self.factors:
            raise DimensionError("a factor model needs at least one factor")
        self.factors = [np.array(a, dtype=np.float64, ndmin=2) for a in self.factors]
        self.rank = self.factors[0].shape[1]
        if self.rank < 1:
            raise DimensionError("rank must be positive")
        for n, a in enumerate(self.factors):
            if a.ndim != 2 or a.shape[1] != self.rank:
                raise DimensionError(
                    f"factor {n} has shape {a.shape}; expected {self.rank} columns"
                )
        if self.nonneg and any(np.any(a < 0) for a in self.factors):
            raise DomainError("nonnegative model has negative entries")

    @property
    def shape(self):
        return tuple(a.shape[0] for a in self.factors)

    def copy(self) -> "FactorModel":
        return FactorModel([a.copy() for a in self.factors], nonneg=self.nonneg)

    def reconstruct(self) -> np.ndarray:
        return cpd_reconstruct(self)


def khatri_rao(matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product; the first matrix's row index varies slowest."""
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not mats:
        raise DimensionError("khatri_rao needs at least one matrix")
    r = mats[0].shape[1] if mats[0].ndim == 2 else None
    for m in mats:
        if m.ndim != 2 or m.shape[1] != r:
            raise DimensionError(
                f"all matrices need {r} columns; got shapes {[x.shape for x in mats]}"
            )
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, r)
    return out


def _check_mode(n, ndim):
    if not 0 <= n < ndim:
        raise DimensionError(f"mode {n} out of range for a {ndim}-way tensor")


def mode_n_unfold(t: np.ndarray, n: int) -> np.ndarray:
    t = np.asarray(t)
    _check_mode(n, t.ndim)
    return np.moveaxis(t, n, -1).reshape(-1, t.shape[n])


def fold_mode_n(m: np.ndarray, n: int, shape) -> np.ndarray:
    """Inverse of :func:`mode_n_unfold`."""
    m = np.asarray(m)
    shape = tuple(int(s) for s in shape)
    _check_mode(n, len(shape))
    rest = shape[:n] + shape[n + 1:]
    if m.ndim != 2 or m.shape != (int(np.prod(rest)), shape[n]):
        raise DimensionError(
            f"matrix of shape {m.shape} cannot be folded along mode {n} into {shape}"
        )
    return np.moveaxis(m.reshape(rest + (shape[n],)), -1, n)


def cpd_reconstruct(model: FactorModel, shape=None) -> np.ndarray:
    """Synthesize ``sum_f prod_n A_n(i_n, f)``."""
    factors = model.factors
    if shape is not None and tuple(shape) != model.shape:
        raise DimensionError(f"model shape {model.shape} does not match {tuple(shape)}")
    if len(factors) == 1:
        return factors[0].sum(axis=1)
    rest = khatri_rao(factors[1:])
    return (factors[0] @ rest.T).reshape(model.shape)


def masked_sq_error(t, that, mask=None) -> float:
    t = np.asarray(t, dtype=np.float64)
    that = np.asarray(that, dtype=np.float64)
    if t.shape != that.shape:
        raise DimensionError(f"shapes differ: {t.shape} vs {that.shape}")
    diff = t - that
    if mask is not None:
        diff = diff[as_mask(mask, t.shape)]
    return float(np.dot(diff.ravel(), diff.ravel()))


def numerical_rank(m: np.ndarray, scale: Optional[float] = None) -> int:
    """Matrix rank with threshold ``max(dim) * 1e-12 * scale``.

    ``scale`` defaults to the largest singular value of ``m``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    if scale is None:
        scale = s[0] if s.size else 0.0
    if scale <= 0.0:
        return 0
    return int(np.sum(s > max(m.shape) * RANK_EPS * scale))


def kruskal_rank(m: np.ndarray, max_columns: int = KRUSKAL_MAX_COLUMNS) -> int:
    """Largest k such that every set of k columns of ``m`` is linearly independent.

    Brute force over column subsets, so the cost grows like ``2**F``; matrices
    with more than ``max_columns`` columns are refused.  Subset ranks use the
    largest singular value of the whole matrix as the reference scale.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError("kruskal_rank needs a non-empty matrix")
    n_cols = m.shape[1]
    if n_cols > max_columns:
        raise CapabilityError(
            f"kruskal_rank is exponential in the column count; {n_cols} > {max_columns}"
        )
    scale = np.linalg.norm(m, 2)
    upper = numerical_rank(m)
    k = 0
    for size in range(1, upper + 1):
        if all(numerical_rank(m[:, list(cols)], scale) == size
               for cols in combinations(range(n_cols), size)):
            k = size
        else:
            break
    return k


@dataclass
class IdentifiabilityReport:
    k2: int
    k3: int
    k4: int
    rank: int
    satisfied: bool


def identifiability_check(a2, a3, a4, rank: int) -> IdentifiabilityReport:
    """Sufficient condition for ``khatri_rao([a2, a3, a4])`` to have full column rank."""
    for a in (a2, a3, a4):
        if np.asarray(a).ndim != 2 or np.asarray(a).shape[1] != rank:
            raise DimensionError(f"all factors must have {rank} columns")
    k2, k3, k4 = (kruskal_rank(a) for a in (a2, a3, a4))
    return IdentifiabilityReport(k2, k3, k4, rank, k2 + k3 + k4 >= rank + 2)
