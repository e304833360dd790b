"""Alternating least squares for CPD of a compound tensor under aggregation constraints.

Each outer iteration updates the factors in the order A1, A2, ..., AN.

* ``EXACT``: A1 keeps its aggregate row equal to the sum of the detailed rows;
  the other factors are plain (optionally nonnegative) masked LS.
* ``INEXACT``: A1 solves the coupled QP ``G A1^T e <= 0``; factor ``n >= 1``
  is constrained by ``(khatri_rao(other non-first factors) * w) A_n^T <= 0``
  with ``w = e^T A1``.  The current iterate is always feasible for the next
  block, so the masked cost never increases.
* ``UNCONSTRAINED``: ordinary masked CPD (nonnegative when ``nonneg``).
"""
import dataclasses
import enum
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import _kernels
from .aggregation import (AggregationKind, CompoundTensor, inexact_constraint_values,
                          selector_vectors)
from .errors import ConvergenceError, DimensionError, DomainError, GrateError, StagnationError
from .solvers import (CoupledQp, DEFAULT_MAX_ITER, DEFAULT_TOL, coupled_a1_qp, exact_a1_ls,
                      solve_gram_columns)
from .tensor import (FactorModel, KRUSKAL_MAX_COLUMNS, cpd_reconstruct, identifiability_check,
                     khatri_rao, mode_n_unfold)

log = logging.getLogger(__name__)


class FitMode(enum.Enum):
    EXACT = "exact"
    INEXACT = "inexact"
    UNCONSTRAINED = "unconstrained"

    @classmethod
    def parse(cls, value) -> "FitMode":
        if isinstance(value, cls):
            return value
        value = str(value).lower()
        if value == "ntf":
            return cls.UNCONSTRAINED
        try:
            return cls(value)
        except ValueError:
            raise DomainError(f"unknown fit mode {value!r}") from None


@dataclass
class FitConfig:
    rank: int
    mode: FitMode = FitMode.INEXACT
    nonneg: bool = False
    max_iters: int = 200
    rel_tol: float = 1e-6
    seed: int = 0
    init_scale: float = 1.0
    solver_tol: float = DEFAULT_TOL
    solver_max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        self.mode = FitMode.parse(self.mode)
        if self.rank < 1:
            raise DomainError("rank must be at least 1")
        if self.max_iters < 1:
            raise DomainError("max_iters must be at least 1")
        if not self.rel_tol > 0:
            raise DomainError("rel_tol must be positive")
        if self.init_scale < 0:
            raise DomainError("init_scale must be nonnegative")

    def replace(self, **changes) -> "FitConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class IterationRecord:
    cost: float
    violation: float
    seconds: float


@dataclass
class FitTrace:
    records: List[IterationRecord] = field(default_factory=list)
    reason: str = ""
    ridge_events: int = 0
    revivals: int = 0
    identifiability: Optional[dict] = None

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.records])

    @property
    def violations(self) -> np.ndarray:
        return np.array([r.violation for r in self.records])

    @property
    def final_cost(self) -> float:
        return self.records[-1].cost if self.records else float("inf")

    @property
    def converged(self) -> bool:
        return self.reason in ("converged", "exact_fit")

    def to_dict(self) -> dict:
        return {
            "reason": self.reason,
            "iterations": len(self.records),
            "final_cost": self.final_cost,
            "ridge_events": self.ridge_events,
            "revivals": self.revivals,
            "identifiability": self.identifiability,
            "records": [dataclasses.asdict(r) for r in self.records],
        }


W_ZERO_RTOL = 1e-9
# below this fraction of ||X||^2 the cost is at roundoff level
EXACT_FIT_RTOL = 1e-24


def latent_gap_weights(a1, e):
    """``e^T A1`` with roundoff-level entries set to zero.

    An entry whose magnitude is below ``1e-9 * ||A1[:, r]||_1`` carries no
    sign information, yet as a diagonal scaling it would turn into a real
    sign constraint on the remaining factors.
    """
    w = e @ a1
    w[np.abs(w) <= W_ZERO_RTOL * np.abs(a1).sum(axis=0)] = 0.0
    return w


DEAD_RTOL = 1e-12
# revivals allowed per rank component over one fit
REVIVALS_PER_COMPONENT = 5


def revive_dead_components(factors, rng, init_scale=1.0) -> List[int]:
    """Re-draw components that nonnegative ALS has switched off.

    A component is dead when the product of its column norms is at most
    ``1e-12`` of the largest one.  Once dead it stays dead: its Gram rows
    vanish and the ridge keeps it at zero.  Its first-factor column is set
    to zero and its other columns are redrawn uniformly, so the model (and
    the cost) is unchanged and the next first-factor update can use it.
    Returns the revived component indices.
    """
    size = np.prod([np.linalg.norm(a, axis=0) for a in factors], axis=0)
    top = float(size.max(initial=0.0))
    if top == 0.0:
        return []
    dead = np.flatnonzero(size <= DEAD_RTOL * top)
    if dead.size == 0:
        return []
    live = np.setdiff1d(np.arange(size.size), dead)
    factors[0][:, dead] = 0.0
    for a in factors[1:]:
        scale = float(np.abs(a[:, live]).max(initial=0.0)) or init_scale
        a[:, dead] = rng.uniform(0.0, scale, size=(a.shape[0], dead.size))
    return dead.tolist()


def init_factors(shape, config: FitConfig) -> FactorModel:
    """Seeded uniform(0, init_scale) factors for modes 1..N-1; A1 starts at zero."""
    rng = np.random.default_rng(config.seed)
    factors = [np.zeros((shape[0], config.rank))]
    for size in shape[1:]:
        a = rng.uniform(0.0, config.init_scale, size=(size, config.rank))
        factors.append(np.abs(a) if config.nonneg else a)
    return FactorModel(factors, nonneg=config.nonneg)


def constraint_violation(model: FactorModel, kind: AggregationKind, scale: float) -> float:
    """Largest breach of the aggregation structure on the reconstruction, over ``scale``."""
    vals = inexact_constraint_values(model)
    if kind is AggregationKind.EXACT:
        worst = float(np.max(np.abs(vals), initial=0.0))
    else:
        worst = float(max(0.0, -np.min(vals, initial=0.0)))
    return worst / scale


def _violation_scale(c: CompoundTensor) -> float:
    agg = np.abs(c.aggregate[c.aggregate_mask])
    if agg.size == 0:
        agg = np.abs(c.data[c.mask])
    return max(float(np.max(agg, initial=0.0)), np.finfo(float).tiny)


class _Problem:
    """Unfolded data shared by all iterations of a fit."""

    def __init__(self, c: CompoundTensor):
        x = np.where(c.mask, c.data, 0.0)
        self.shape = c.shape
        self.x = x
        self.mask = c.mask
        self.targets = [np.ascontiguousarray(mode_n_unfold(x, n)) for n in range(x.ndim)]
        self.masks = [np.ascontiguousarray(mode_n_unfold(c.mask, n)) for n in range(x.ndim)]
        self.norm2 = float(np.sum(x[c.mask] ** 2))

    def cost(self, model: FactorModel) -> float:
        d = (self.x - cpd_reconstruct(model))[self.mask]
        return float(d @ d)


def fit(compound: CompoundTensor, config: FitConfig, init: Optional[FactorModel] = None,
        kernels=None):
    """Fit a rank-``config.rank`` CPD to ``compound``; returns ``(model, trace)``."""
    kernels = kernels or _kernels.active
    prob = _Problem(compound)
    mode = config.mode
    n_modes = len(prob.shape)
    model = init.copy() if init is not None else init_factors(prob.shape, config)
    factors = model.factors
    e = selector_vectors(prob.shape[0] - 1).e
    scale = _violation_scale(compound)
    kind = compound.kind if mode is FitMode.UNCONSTRAINED else AggregationKind(mode.value)
    warm = [None] * n_modes
    trace = FitTrace()
    prev = None
    revive_rng = np.random.default_rng([config.seed, 1])
    revive_budget = REVIVALS_PER_COMPONENT * config.rank
    opts = dict(tol=config.solver_tol, max_iter=config.solver_max_iter, kernels=kernels)

    for it in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        block = 0
        try:
            K = khatri_rao(factors[1:])
            H, g, counts = kernels.masked_gram(K, prob.targets[0], prob.masks[0])
            if mode is FitMode.UNCONSTRAINED:
                sol = solve_gram_columns(H, g, counts, None, config.nonneg, warm=warm[0], **opts)
                factors[0] = sol.x.T
                warm[0] = sol.active
                trace.ridge_events += int(sol.ridged.sum())
            else:
                if mode is FitMode.EXACT:
                    sol = exact_a1_ls(H, g, counts, config.nonneg, warm=warm[0], **opts)
                else:
                    qp = CoupledQp(H, g, counts, K, e)
                    sol = coupled_a1_qp(qp, config.nonneg, warm=warm[0], **opts)
                factors[0] = sol.x
                warm[0] = sol.active
                trace.ridge_events += int(sol.ridged)

            for n in range(1, n_modes):
                block = n
                others = [factors[m] for m in range(n_modes) if m != n]
                K = khatri_rao(others)
                H, g, counts = kernels.masked_gram(K, prob.targets[n], prob.masks[n])
                C = None
                if mode is FitMode.INEXACT:
                    w = latent_gap_weights(factors[0], e)
                    rest = [factors[m] for m in range(1, n_modes) if m != n]
                    C = (khatri_rao(rest) if rest else np.ones((1, config.rank))) * w[None, :]
                sol = solve_gram_columns(H, g, counts, C, config.nonneg, warm=warm[n], **opts)
                factors[n] = sol.x.T
                warm[n] = sol.active
                trace.ridge_events += int(sol.ridged.sum())
        except ConvergenceError as exc:
            exc.context.update(iteration=it, block=block)
            raise

        cost = prob.cost(model)
        trace.records.append(IterationRecord(
            cost, constraint_violation(model, kind, scale), time.perf_counter() - t0))

        if cost <= EXACT_FIT_RTOL * prob.norm2:
            trace.reason = "exact_fit"
            break
        if it == 1 and prob.norm2 > 0 and all(not np.any(a) for a in factors):
            raise StagnationError("ALS is stuck at the zero model; check init_scale")
        revived = []
        if trace.revivals < revive_budget:
            revived = revive_dead_components(factors, revive_rng, config.init_scale or 1.0)
            trace.revivals += len(revived)
        if not revived and prev is not None and \
                abs(prev - cost) / max(prev, np.finfo(float).tiny) < config.rel_tol:
            trace.reason = "converged"
            break
        prev = cost
    else:
        trace.reason = "max_iters"

    if mode is FitMode.EXACT and n_modes == 4 and config.rank <= KRUSKAL_MAX_COLUMNS:
        rep = identifiability_check(factors[1], factors[2], factors[3], config.rank)
        trace.identifiability = dataclasses.asdict(rep)
        if not rep.satisfied:
            log.info("Kruskal-rank condition not met (%d+%d+%d < %d)",
                     rep.k2, rep.k3, rep.k4, config.rank + 2)
    return model, trace


def fit_multistart(compound: CompoundTensor, config: FitConfig, n_starts: int = 1, kernels=None):
    """Run ``fit`` with seeds ``seed, seed+1, ...`` and keep the lowest final cost."""
    if n_starts < 1:
        raise DomainError("n_starts must be at least 1")
    best = None
    last_exc = None
    for s in range(n_starts):
        try:
            result = fit(compound, config.replace(seed=config.seed + s), kernels=kernels)
        except GrateError as exc:
            log.warning("start %d failed: %s", s, exc)
            last_exc = exc
            continue
        if best is None or result[1].final_cost < best[1].final_cost:
            best = result
    if best is None:
        raise last_exc
    return best


def merge_trailing_modes(c: CompoundTensor) -> CompoundTensor:
    """Fold the last two modes into one (e.g. month x year -> 48 months)."""
    shape = c.shape[:-2] + (c.shape[-2] * c.shape[-1],)
    return CompoundTensor(c.data.reshape(shape), c.mask.reshape(shape), c.kind)


def ntf_baseline(compound: CompoundTensor, config: FitConfig, merge_time_modes: bool = False,
                 n_starts: int = 1, kernels=None):
    """Nonnegative CPD of the compound tensor with no aggregation constraint.

    With ``merge_time_modes`` the last two modes are merged first, giving the
    three-way appliance x home x (month, year) model.  Use
    :func:`reconstruct_as` to map its reconstruction back.
    """
    cfg = config.replace(mode=FitMode.UNCONSTRAINED, nonneg=True)
    target = merge_trailing_modes(compound) if merge_time_modes else compound
    return fit_multistart(target, cfg, n_starts, kernels=kernels)


def reconstruct_as(model: FactorModel, shape) -> np.ndarray:
    return cpd_reconstruct(model).reshape(shape)


def predict(model: FactorModel, at) -> list:
    """``[(index, value), ...]`` of the reconstruction at the set entries of ``at``."""
    full = cpd_reconstruct(model)
    at = np.asarray(at, dtype=bool)
    if at.shape != full.shape:
        raise DimensionError(f"query mask {at.shape} does not match model shape {full.shape}")
    if model.nonneg:
        full = np.maximum(full, 0.0)
    return [(tuple(int(i) for i in idx), float(full[tuple(idx)])) for idx in np.argwhere(at)]


def parameter_count(shape, rank: int) -> int:
    return int(sum(shape)) * rank


def matched_rank(shape, reference_shape, reference_rank: int) -> int:
    """Rank for ``shape`` whose parameter count is closest to the reference model's."""
    target = parameter_count(reference_shape, reference_rank)
    return max(1, int(round(target / sum(shape))))
