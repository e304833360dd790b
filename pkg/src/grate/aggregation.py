"""Compound tensors: detailed slabs along mode 0 with the aggregate slab appended.

A compound tensor of shape ``(I1 + 1, I2, ..., IN)`` holds the detailed data
in slabs ``0 .. I1-1`` and the mode-0 aggregate in slab ``I1``.  Under exact
aggregation the aggregate equals the fiber sum; under inexact aggregation it
dominates the fiber sum because unmodeled sources also contribute.
"""
import enum
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import DimensionError, DomainError
from .tensor import FactorModel, as_mask, as_tensor, khatri_rao

DEFAULT_REL_TOL = 1e-6
DEFAULT_ABS_TOL = 1e-9


class AggregationKind(enum.Enum):
    EXACT = "exact"
    INEXACT = "inexact"

    @classmethod
    def parse(cls, value) -> "AggregationKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DomainError(f"unknown aggregation kind {value!r}") from None


@dataclass
class CompoundTensor:
    data: np.ndarray
    mask: np.ndarray
    kind: AggregationKind

    def __post_init__(self):
        self.data = as_tensor(self.data)
        if self.data.ndim < 2:
            raise DimensionError("a compound tensor needs at least two modes")
        if self.data.shape[0] < 2:
            raise DimensionError("mode 0 needs at least one detailed slab plus the aggregate slab")
        self.mask = as_mask(self.mask, self.data.shape)
        self.kind = AggregationKind.parse(self.kind)

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_detailed(self) -> int:
        return self.data.shape[0] - 1

    @property
    def detailed(self) -> np.ndarray:
        return self.data[:-1]

    @property
    def detailed_mask(self) -> np.ndarray:
        return self.mask[:-1]

    @property
    def aggregate(self) -> np.ndarray:
        return self.data[-1]

    @property
    def aggregate_mask(self) -> np.ndarray:
        return self.mask[-1]

    def with_mask(self, mask) -> "CompoundTensor":
        return CompoundTensor(self.data, mask, self.kind)


@dataclass
class SelectorVectors:
    """``e_s`` picks the aggregate slab, ``e_b`` the detailed ones; ``e = e_b - e_s``."""

    e_s: np.ndarray
    e_b: np.ndarray

    @property
    def e(self) -> np.ndarray:
        return self.e_b - self.e_s


def selector_vectors(i1: int) -> SelectorVectors:
    if i1 < 1:
        raise DomainError(f"need at least one detailed slab, got i1={i1}")
    e_s = np.zeros(i1 + 1)
    e_s[-1] = 1.0
    return SelectorVectors(e_s=e_s, e_b=1.0 - e_s)


def build_compound(detailed, mask=None, kind=AggregationKind.EXACT, residual=None) -> CompoundTensor:
    """Append the mode-0 aggregate of ``detailed`` (plus ``residual`` if inexact).

    The aggregate at a trailing index is observed iff the detailed fiber
    beneath it is fully observed; unobserved detailed values do not enter it.
    """
    detailed = as_tensor(detailed)
    if detailed.ndim < 2:
        raise DimensionError("detailed tensor needs at least two modes")
    mask = as_mask(mask, detailed.shape)
    kind = AggregationKind.parse(kind)
    trailing = detailed.shape[1:]
    if kind is AggregationKind.EXACT:
        if residual is not None:
            raise DomainError("exact aggregation takes no residual")
        residual = np.zeros(trailing)
    else:
        if residual is None:
            raise DomainError("inexact aggregation needs a nonnegative residual tensor")
        residual = np.asarray(residual, dtype=np.float64)
        if residual.shape != trailing:
            raise DimensionError(f"residual shape {residual.shape} != {trailing}")
        if np.any(residual < 0) or not np.all(np.isfinite(residual)):
            raise DomainError("residual must be finite and nonnegative")
    full = mask.all(axis=0)
    values = np.where(mask, detailed, 0.0)
    agg = np.where(full, values.sum(axis=0) + residual, 0.0)
    data = np.concatenate([values, agg[None]], axis=0)
    cmask = np.concatenate([mask, full[None]], axis=0)
    return CompoundTensor(data, cmask, kind)


def aggregation_tolerance(aggregate, tol=None) -> np.ndarray:
    """Per-entry validation tolerance: ``tol`` if given, else 1e-6 relative with a 1e-9 floor."""
    aggregate = np.asarray(aggregate, dtype=np.float64)
    if tol is not None:
        if tol < 0:
            raise DomainError("tolerance must be nonnegative")
        return np.full(aggregate.shape, float(tol))
    return np.maximum(DEFAULT_REL_TOL * np.abs(aggregate), DEFAULT_ABS_TOL)


@dataclass
class AggregationReport:
    violations: List[Tuple[Tuple[int, ...], float]]

    @property
    def ok(self) -> bool:
        return not self.violations


def check_aggregation(c: CompoundTensor, tol: Optional[float] = None) -> AggregationReport:
    """List fully observed fibers whose gap (aggregate - fiber sum) breaks the kind."""
    full = c.mask.all(axis=0)
    gap = c.aggregate - c.detailed.sum(axis=0)
    t = aggregation_tolerance(c.aggregate, tol)
    if c.kind is AggregationKind.EXACT:
        bad = full & (np.abs(gap) > t)
    else:
        bad = full & (gap < -t)
    return AggregationReport([
        (tuple(int(i) for i in idx), float(gap[tuple(idx)])) for idx in np.argwhere(bad)
    ])


def latent_equality_residual(model: FactorModel) -> np.ndarray:
    """``A1^T (e_s - e_b)``: aggregate row minus the sum of the detailed rows."""
    a1 = model.factors[0]
    return a1[-1] - a1[:-1].sum(axis=0)


def inexact_constraint_values(model: FactorModel) -> np.ndarray:
    """``G A1^T (e_s - e_b)`` with ``G = khatri_rao(A2, ..., AN)``.

    Entry ``(i2, ..., iN)`` (C order) is the model's aggregate minus its fiber
    sum at that index.
    """
    g = khatri_rao(model.factors[1:])
    return g @ latent_equality_residual(model)
