"""Energy-disaggregation experiments: metrics, hiding protocols and synthetic data.

The energy tensor is appliance x home x month x year, with the whole-home
aggregate appended as the last appliance slab.  Evaluation only scores
entries that were observed before hiding and hidden by the protocol.
"""
import calendar
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .aggregation import AggregationKind, CompoundTensor, build_compound
from .engine import FitConfig, fit_multistart, ntf_baseline, reconstruct_as
from .errors import DimensionError, DomainError
from .tensor import FactorModel, as_mask, cpd_reconstruct

log = logging.getLogger(__name__)

DEFAULT_APPLIANCES = ("HVAC", "FN", "OV", "WD", "MW", "RF")
MONTH_LABELS = tuple(calendar.month_abbr[1:])


@dataclass
class EnergyTensorMeta:
    appliance_names: List[str]
    home_ids: List[str]
    month_labels: List[str] = field(default_factory=lambda: list(MONTH_LABELS))
    year_labels: List[int] = field(default_factory=list)

    def check(self, shape):
        """Raise unless the labels match a compound shape ``(I1+1, I2, I3, I4)``."""
        expected = (len(self.appliance_names) + 1, len(self.home_ids), len(self.month_labels),
                    len(self.year_labels))
        if tuple(shape) != expected:
            raise DimensionError(f"meta describes shape {expected}, tensor has {tuple(shape)}")

    @classmethod
    def default(cls, shape) -> "EnergyTensorMeta":
        """Generic labels for a compound shape; the usual six appliance codes when there are six."""
        n_app = shape[0] - 1
        names = list(DEFAULT_APPLIANCES) if n_app == len(DEFAULT_APPLIANCES) else [
            f"app{i}" for i in range(n_app)]
        months = list(MONTH_LABELS) if shape[2] == 12 else [f"t{i}" for i in range(shape[2])]
        years = list(range(2015, 2015 + (shape[3] if len(shape) > 3 else 1)))
        return cls(names, [f"h{i:03d}" for i in range(shape[1])], months, years)


# ---------------------------------------------------------------- metrics

def nmse(truth, est, eval_mask=None) -> float:
    """Sum of squared errors over ``eval_mask`` divided by the sum of squared truths."""
    truth = np.asarray(truth, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if truth.shape != est.shape:
        raise DimensionError(f"shapes differ: {truth.shape} vs {est.shape}")
    m = as_mask(eval_mask, truth.shape)
    if not m.any():
        raise DomainError("NMSE needs a nonempty evaluation set")
    t, e = truth[m], est[m]
    den = float(t @ t)
    if den <= 0.0:
        raise DomainError("NMSE is undefined when the true entries are all zero")
    return float((t - e) @ (t - e)) / den


def pec(truth, est, aggregate):
    """``|truth - est| / aggregate``; works elementwise on arrays."""
    aggregate = np.asarray(aggregate, dtype=np.float64)
    if np.any(aggregate <= 0):
        raise DomainError("PEC needs a positive aggregate")
    out = np.abs(np.asarray(truth, dtype=np.float64) - np.asarray(est, dtype=np.float64)) / aggregate
    return float(out) if out.ndim == 0 else out


def arpec(groups: Dict[str, Sequence[float]]) -> Dict[str, float]:
    """Root-mean-square PEC per appliance."""
    out = {}
    for name, values in groups.items():
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            raise DomainError(f"no PEC values for {name!r}")
        top = float(np.max(np.abs(v)))
        # scaled so tiny or huge PECs neither underflow nor overflow when squared
        out[name] = top * float(np.sqrt(np.mean((v / top) ** 2))) if top > 0 else 0.0
    return out


# ---------------------------------------------------------------- hiding

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def hide_fibers(mask, fraction: float, seed: int = 0):
    """Hide the detailed entries of a random share of the fully observed mode-0 fibers.

    ``mask`` is a compound mask; the aggregate slab is left untouched.
    Returns ``(new_mask, hidden)`` with ``hidden`` the trailing indices of the
    chosen fibers.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"fraction must lie in [0, 1], got {fraction}")
    mask = np.asarray(mask, dtype=bool)
    candidates = np.argwhere(mask[:-1].all(axis=0))
    n_hide = _round_half_up(fraction * len(candidates))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(candidates), size=n_hide, replace=False))
    new = mask.copy()
    hidden = [tuple(int(i) for i in candidates[c]) for c in chosen]
    for idx in hidden:
        new[(slice(0, -1),) + idx] = False
    return new, hidden


def hide_homes(mask, homes: Union[int, Sequence], seed: int = 0, home_ids=None):
    """Hide every detailed entry of some homes (mode 1), keeping their aggregates.

    ``homes`` is a count (chosen at random) or an explicit list of home ids
    (looked up in ``home_ids``) or integer positions.
    """
    mask = np.asarray(mask, dtype=bool)
    n_homes = mask.shape[1]
    if isinstance(homes, (int, np.integer)):
        if not 0 <= homes <= n_homes:
            raise DomainError(f"cannot hide {homes} of {n_homes} homes")
        rng = np.random.default_rng(seed)
        idx = sorted(int(i) for i in rng.choice(n_homes, size=int(homes), replace=False))
    else:
        idx = []
        for h in homes:
            if home_ids is not None and h in list(home_ids):
                idx.append(list(home_ids).index(h))
            elif isinstance(h, (int, np.integer)) and 0 <= h < n_homes:
                idx.append(int(h))
            else:
                raise DomainError(f"unknown home {h!r}")
        idx = sorted(set(idx))
    new = mask.copy()
    new[:-1, idx] = False
    hidden = [home_ids[i] for i in idx] if home_ids is not None else idx
    return new, hidden


# ---------------------------------------------------------------- synthetic data

def synth_generate(shape, rank: int, kind=AggregationKind.EXACT, noise_sd: float = 0.0,
                   residual_scale: float = 0.0, seed: int = 0):
    """Ground truth from seeded nonnegative rank-``rank`` factors.

    ``shape`` is the compound shape ``(I1+1, I2, ...)``.  For inexact data a
    rank-one nonnegative residual, independent of the detailed factors and
    with mean ``residual_scale * mean fiber sum``, is added to the aggregate.
    Gaussian noise of standard deviation ``noise_sd * rms(truth)`` is added to
    the detailed tensor (then clamped at 0) before aggregation, so exact data
    stay exactly aggregated.

    Returns ``(truth, model, compound)``: the detailed ground truth, the
    noiseless CPD of the compound tensor, and the compound tensor.
    """
    shape = tuple(int(s) for s in shape)
    if rank < 1:
        raise DomainError("rank must be at least 1")
    if len(shape) < 2 or shape[0] < 2:
        raise DimensionError("compound shape needs at least one detailed slab and two modes")
    if residual_scale < 0:
        raise DomainError("residual_scale must be nonnegative")
    kind = AggregationKind.parse(kind)
    rng = np.random.default_rng(seed)
    det_shape = (shape[0] - 1,) + shape[1:]
    factors = [rng.uniform(0.0, 1.0, size=(s, rank)) for s in det_shape]
    clean = cpd_reconstruct(FactorModel(factors, nonneg=True))
    truth = clean
    if noise_sd > 0:
        rms = np.sqrt(np.mean(clean ** 2))
        truth = np.maximum(clean + noise_sd * rms * rng.standard_normal(det_shape), 0.0)

    a1 = np.vstack([factors[0], factors[0].sum(axis=0, keepdims=True)])
    cfactors = [a1] + [f.copy() for f in factors[1:]]
    residual = None
    if kind is AggregationKind.INEXACT:
        vecs = [rng.uniform(0.5, 1.5, size=s) for s in shape[1:]]
        residual = vecs[0]
        for v in vecs[1:]:
            residual = np.multiply.outer(residual, v)
        target = residual_scale * truth.sum(axis=0).mean()
        scale = target / residual.mean()
        residual = residual * scale
        if residual_scale > 0:
            col = np.zeros((shape[0], 1))
            col[-1, 0] = scale
            cfactors[0] = np.hstack([a1, col])
            for n, v in enumerate(vecs, start=1):
                cfactors[n] = np.hstack([cfactors[n], v[:, None]])
    model = FactorModel(cfactors, nonneg=True)
    compound = build_compound(truth, None, kind, residual)
    return truth, model, compound


# ---------------------------------------------------------------- protocols

@dataclass
class HiddenFibers:
    fraction: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise DomainError(f"fraction must lie in [0, 1], got {self.fraction}")

    def apply(self, mask, seed, meta=None):
        return hide_fibers(mask, self.fraction, seed)

    def describe(self):
        return f"fibers:{self.fraction:g}"


@dataclass
class HiddenHomes:
    count: Optional[int] = None
    home_ids: Optional[List] = None

    def apply(self, mask, seed, meta=None):
        ids = meta.home_ids if meta is not None else None
        homes = self.count if self.home_ids is None else self.home_ids
        return hide_homes(mask, homes, seed, ids)

    def describe(self):
        return f"homes:{self.count}" if self.home_ids is None else f"homes:{','.join(map(str, self.home_ids))}"


@dataclass
class ExperimentSpec:
    protocol: Union[HiddenFibers, HiddenHomes]
    config: FitConfig
    seed: int = 0
    n_starts: int = 1
    # None, "ntf" (months and years merged, three-way) or "ntf4" (four-way)
    baseline: Optional[str] = None
    baseline_rank: Optional[int] = None

    def __post_init__(self):
        if self.baseline not in (None, "ntf", "ntf4"):
            raise DomainError(f"unknown baseline {self.baseline!r}")


def score(truth, est, eval_mask, aggregate, aggregate_mask, names) -> dict:
    """NMSE per appliance and in total, ARPEC per appliance."""
    per_app = {}
    pecs = {}
    for i, name in enumerate(names):
        m = eval_mask[i]
        if not m.any():
            continue
        if np.any(truth[i][m] != 0):
            per_app[name] = nmse(truth[i], est[i], m)
        ok = m & aggregate_mask & (aggregate > 0)
        if ok.any():
            pecs[name] = pec(truth[i][ok], est[i][ok], aggregate[ok])
    return {
        "nmse": per_app,
        "total_nmse": nmse(truth, est, eval_mask),
        "arpec": arpec(pecs) if pecs else {},
    }


def _trace_summary(trace):
    return {
        "reason": trace.reason,
        "iterations": len(trace.records),
        "final_cost": trace.final_cost,
        "max_violation": float(np.max(trace.violations, initial=0.0)),
        "costs": trace.costs.tolist(),
    }


def run_experiment(compound: CompoundTensor, meta: Optional[EnergyTensorMeta],
                   spec: ExperimentSpec, truth=None, truth_mask=None) -> dict:
    """Hide data per ``spec.protocol``, fit, and score the hidden entries.

    ``truth`` is the detailed ground truth (defaults to the compound's own
    detailed slabs); only entries observed in ``compound`` and in
    ``truth_mask`` can be scored.
    """
    if meta is None:
        meta = EnergyTensorMeta.default(compound.shape)
    names = list(meta.appliance_names)
    if len(names) != compound.n_detailed:
        raise DimensionError("meta appliance count does not match the tensor")
    if truth is None:
        truth = compound.detailed
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != compound.detailed.shape:
        raise DimensionError(f"truth shape {truth.shape} != {compound.detailed.shape}")
    truth_mask = as_mask(truth_mask, truth.shape)

    new_mask, hidden = spec.protocol.apply(compound.mask, spec.seed, meta)
    eval_mask = compound.detailed_mask & ~new_mask[:-1] & truth_mask
    if not eval_mask.any():
        raise DomainError("the protocol hid no scorable entries")
    masked = compound.with_mask(new_mask)
    agg, agg_mask = compound.aggregate, compound.aggregate_mask

    report = {
        "protocol": spec.protocol.describe(),
        "seed": spec.seed,
        "n_eval": int(eval_mask.sum()),
        "hidden": len(hidden),
        "appliances": names,
        "methods": {},
    }
    model, trace = fit_multistart(masked, spec.config, spec.n_starts)
    est = cpd_reconstruct(model)[:-1]
    report["methods"]["GRATE"] = dict(score(truth, est, eval_mask, agg, agg_mask, names),
                                      rank=spec.config.rank, fit=_trace_summary(trace))
    if spec.baseline is not None:
        merge = spec.baseline == "ntf" and compound.data.ndim == 4
        rank = spec.baseline_rank or spec.config.rank
        bmodel, btrace = ntf_baseline(masked, spec.config.replace(rank=rank), merge,
                                      spec.n_starts)
        best = reconstruct_as(bmodel, compound.shape)[:-1]
        report["methods"]["NTF"] = dict(score(truth, best, eval_mask, agg, agg_mask, names),
                                        rank=rank, three_way=merge, fit=_trace_summary(btrace))
    return report


def sweep_fibers(compound, meta, fractions, spec: ExperimentSpec, truth=None, truth_mask=None):
    """One report per hiding fraction (NMSE-versus-missing-fraction curve)."""
    reports = []
    for f in fractions:
        s = ExperimentSpec(HiddenFibers(f), spec.config, spec.seed, spec.n_starts,
                           spec.baseline, spec.baseline_rank)
        reports.append(run_experiment(compound, meta, s, truth, truth_mask))
    return reports


def format_table(report: dict) -> str:
    """Plain-text table: one row per appliance, one column per method, NMSE then ARPEC."""
    methods = list(report["methods"])
    lines = []
    for metric in ("nmse", "arpec"):
        lines.append(f"{metric.upper()} ({report['protocol']})")
        lines.append("Device".ljust(10) + "".join(m.rjust(12) for m in methods))
        for name in report["appliances"]:
            cells = []
            for m in methods:
                v = report["methods"][m][metric].get(name)
                cells.append(("-" if v is None else f"{v:.4g}").rjust(12))
            lines.append(name.ljust(10) + "".join(cells))
        if metric == "nmse":
            lines.append("Total".ljust(10) + "".join(
                f"{report['methods'][m]['total_nmse']:.4g}".rjust(12) for m in methods))
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- rank selection

def cv_select_rank(compound: CompoundTensor, ranks: Sequence[int], config: FitConfig,
                   holdout: float = 0.1, seed: int = 0, n_starts: int = 1):
    """Hold out a random share of observed detailed entries; pick the rank with least NMSE.

    Returns ``(best_rank, {rank: nmse})``.
    """
    if not 0.0 < holdout < 1.0:
        raise DomainError(f"holdout must lie in (0, 1), got {holdout}")
    if not ranks:
        raise DomainError("need at least one candidate rank")
    rng = np.random.default_rng(seed)
    obs = np.argwhere(compound.detailed_mask)
    n_out = max(1, _round_half_up(holdout * len(obs)))
    pick = obs[rng.choice(len(obs), size=n_out, replace=False)]
    mask = compound.mask.copy()
    held = np.zeros(compound.detailed.shape, dtype=bool)
    for idx in pick:
        mask[tuple(idx)] = False
        held[tuple(idx)] = True
    train = compound.with_mask(mask)
    scores = {}
    for r in ranks:
        model, _ = fit_multistart(train, config.replace(rank=int(r)), n_starts)
        scores[int(r)] = nmse(compound.detailed, cpd_reconstruct(model)[:-1], held)
    best = min(scores, key=lambda r: (scores[r], r))
    return best, scores
