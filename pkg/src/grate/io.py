"""File formats: long-format meter CSV, GRT1 tensors, GRM1 factor models, JSON fit configs.

CSV contract: UTF-8, header ``home_id,year,month,appliance,kwh``, one row per
observed monthly reading; ``appliance`` is ``AGGREGATE`` for the whole-home
meter.  Ids are restricted to ``[A-Za-z0-9_-]`` so no quoting is needed.

GRT1: ``GRT1 <N> <I1> ... <IN>`` on the first line, then the values in C
order separated by whitespace; ``NA`` marks a missing entry.

GRM1: ``GRM1 <R> <N> <I1> ... <IN> <nonneg:0|1>``, then every factor matrix
row-major, one row per line.
"""
import csv
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .aggregation import AggregationKind, CompoundTensor
from .engine import FitConfig, FitMode
from .errors import DimensionError, DomainError, ParseError
from .experiments import MONTH_LABELS, EnergyTensorMeta
from .tensor import MAX_MODES, FactorModel, as_mask

log = logging.getLogger(__name__)

CSV_HEADER = ("home_id", "year", "month", "appliance", "kwh")
AGGREGATE = "AGGREGATE"
_ID = re.compile(r"[A-Za-z0-9_-]+\Z")
_FMT = "%.17g"


def _fmt(v: float) -> str:
    return _FMT % v


def _parse_float(token: str, position) -> float:
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"not a number: {token!r}", position) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {token!r}", position)
    return v


def _parse_int(token: str, position, what: str) -> int:
    if not re.fullmatch(r"[+-]?\d+", token.strip()):
        raise ParseError(f"{what} must be an integer, got {token!r}", position)
    return int(token)


# ---------------------------------------------------------------- CSV

@dataclass
class CsvReadStats:
    """Counts gathered while ingesting a CSV."""

    rows: int = 0
    skipped: int = 0
    # aggregates below the sum of their present appliances; masked as missing
    aggregate_below_sum: List[tuple] = field(default_factory=list)

    @property
    def warnings(self) -> int:
        return len(self.aggregate_below_sum)


def read_long_csv(path, appliance_whitelist: Optional[Sequence[str]] = None, stats=None):
    """Build an inexact compound tensor from a long-format CSV.

    Axes: appliances in whitelist order (else in order of first appearance),
    home ids sorted lexicographically, years ascending, months 1..12.
    Returns ``(compound, meta)``; pass a :class:`CsvReadStats` as ``stats``
    to receive counts.
    """
    stats = stats if stats is not None else CsvReadStats()
    whitelist = None
    if appliance_whitelist is not None:
        whitelist = list(appliance_whitelist)
        if AGGREGATE in whitelist or len(set(whitelist)) != len(whitelist) or not whitelist:
            raise DomainError("whitelist must list distinct appliances, not AGGREGATE")

    records = {}
    apps: List[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(f"header must be {','.join(CSV_HEADER)}", "line 1")
        for row in reader:
            line = f"line {reader.line_num}"
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", line)
            home, year, month, app, kwh = (f.strip() for f in row)
            for name, value in (("home_id", home), ("appliance", app)):
                if not _ID.match(value):
                    raise ParseError(f"invalid {name} {value!r}", line)
            year = _parse_int(year, line, "year")
            month = _parse_int(month, line, "month")
            if not 1 <= month <= 12:
                raise ParseError(f"month {month} outside 1..12", line)
            kwh = _parse_float(kwh, line)
            if kwh < 0:
                raise DomainError(f"negative kwh {kwh} at {line}")
            stats.rows += 1
            if whitelist is not None and app != AGGREGATE and app not in whitelist:
                stats.skipped += 1
                continue
            key = (home, year, month, app)
            if key in records:
                raise DomainError(f"duplicate reading {key} at {line} "
                                  f"(first at line {records[key][1]})")
            records[key] = (kwh, reader.line_num)
            if app != AGGREGATE and app not in apps:
                apps.append(app)

    if whitelist is not None:
        apps = whitelist
    if not apps:
        raise ParseError("no appliance readings", str(path))
    homes = sorted({k[0] for k in records})
    years = sorted({k[1] for k in records})
    a_idx = {a: i for i, a in enumerate(apps)}
    a_idx[AGGREGATE] = len(apps)
    h_idx = {h: i for i, h in enumerate(homes)}
    y_idx = {y: i for i, y in enumerate(years)}

    shape = (len(apps) + 1, len(homes), 12, len(years))
    data = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    for (home, year, month, app), (kwh, _) in records.items():
        idx = (a_idx[app], h_idx[home], month - 1, y_idx[year])
        data[idx] = kwh
        mask[idx] = True

    fiber_sum = np.where(mask[:-1], data[:-1], 0.0).sum(axis=0)
    below = mask[-1] & (data[-1] < fiber_sum)
    for h, m, y in np.argwhere(below):
        stats.aggregate_below_sum.append((homes[h], years[y], int(m) + 1))
    mask[-1][below] = False
    data[-1][below] = 0.0
    if stats.warnings:
        log.warning("%d aggregate reading(s) below the sum of their appliances; treated as missing",
                    stats.warnings)

    meta = EnergyTensorMeta(list(apps), homes, list(MONTH_LABELS), years)
    return CompoundTensor(data, mask, AggregationKind.INEXACT), meta


def write_long_csv(compound: CompoundTensor, meta: EnergyTensorMeta, path) -> None:
    """One row per observed entry, values to 17 significant digits."""
    if compound.data.ndim != 4:
        raise DimensionError("the CSV layout needs a four-way compound tensor")
    meta.check(compound.shape)
    if len(meta.month_labels) != 12:
        raise DimensionError("the CSV layout needs a twelve-month axis")
    for h in meta.home_ids:
        if not _ID.match(str(h)):
            raise DomainError(f"home id {h!r} is not writable")
    for a in meta.appliance_names:
        if not _ID.match(str(a)) or a == AGGREGATE:
            raise DomainError(f"appliance name {a!r} is not writable")
    names = list(meta.appliance_names) + [AGGREGATE]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        # appliance-major order keeps first appearance equal to the axis order
        for a, h, m, y in np.argwhere(compound.mask):
            w.writerow((meta.home_ids[h], int(meta.year_labels[y]), int(m) + 1, names[a],
                        _fmt(compound.data[a, h, m, y])))


# ---------------------------------------------------------------- GRT1

def _tokens(text: str):
    return text.split()


def write_tensor(path, tensor, mask=None) -> None:
    t = np.asarray(tensor, dtype=np.float64)
    if not 1 <= t.ndim <= MAX_MODES:
        raise DimensionError(f"tensors must have 1 to {MAX_MODES} modes")
    m = as_mask(mask, t.shape)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"GRT1 {t.ndim} " + " ".join(str(s) for s in t.shape) + "\n")
        rows = t.reshape(-1, t.shape[-1])
        mrows = m.reshape(-1, t.shape[-1])
        for vals, obs in zip(rows, mrows):
            fh.write(" ".join(_fmt(v) if o else "NA" for v, o in zip(vals, obs)) + "\n")


def read_tensor(path):
    """Return ``(tensor, mask)``; missing entries are stored as 0."""
    text = Path(path).read_text(encoding="utf-8")
    tok = _tokens(text)
    if not tok or tok[0] != "GRT1":
        raise ParseError("missing GRT1 magic", "token 0")
    n = _parse_int(tok[1] if len(tok) > 1 else "", "token 1", "mode count")
    if not 1 <= n <= MAX_MODES:
        raise ParseError(f"mode count {n} outside 1..{MAX_MODES}", "token 1")
    if len(tok) < 2 + n:
        raise ParseError("truncated header", f"token {len(tok)}")
    shape = tuple(_parse_int(tok[2 + i], f"token {2 + i}", "mode size") for i in range(n))
    if any(s < 1 for s in shape):
        raise ParseError(f"mode sizes must be positive, got {shape}", "header")
    body = tok[2 + n:]
    size = int(np.prod(shape))
    if len(body) != size:
        raise ParseError(f"expected {size} values, found {len(body)}", f"token {2 + n + min(len(body), size)}")
    values = np.zeros(size)
    mask = np.ones(size, dtype=bool)
    for i, t in enumerate(body):
        if t == "NA":
            mask[i] = False
        else:
            values[i] = _parse_float(t, f"token {2 + n + i}")
    return values.reshape(shape), mask.reshape(shape)


def read_compound(path, kind=AggregationKind.INEXACT) -> CompoundTensor:
    data, mask = read_tensor(path)
    return CompoundTensor(data, mask, kind)


# ---------------------------------------------------------------- GRM1

def write_model(path, model: FactorModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"GRM1 {model.rank} {len(model.factors)} "
                 + " ".join(str(s) for s in model.shape) + f" {int(model.nonneg)}\n")
        for a in model.factors:
            for row in a:
                fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_model(path) -> FactorModel:
    tok = _tokens(Path(path).read_text(encoding="utf-8"))
    if not tok or tok[0] != "GRM1":
        raise ParseError("missing GRM1 magic", "token 0")
    if len(tok) < 3:
        raise ParseError("truncated header", f"token {len(tok)}")
    rank = _parse_int(tok[1], "token 1", "rank")
    n = _parse_int(tok[2], "token 2", "mode count")
    if rank < 1 or not 1 <= n <= MAX_MODES:
        raise ParseError(f"bad rank {rank} or mode count {n}", "token 1")
    if len(tok) < 4 + n:
        raise ParseError("truncated header", f"token {len(tok)}")
    shape = [_parse_int(tok[3 + i], f"token {3 + i}", "mode size") for i in range(n)]
    flag = tok[3 + n]
    if flag not in ("0", "1"):
        raise ParseError(f"nonneg flag must be 0 or 1, got {flag!r}", f"token {3 + n}")
    body = tok[4 + n:]
    size = rank * sum(shape)
    if len(body) != size:
        raise ParseError(f"expected {size} values, found {len(body)}", f"token {4 + n + min(len(body), size)}")
    vals = np.array([_parse_float(t, f"token {4 + n + i}") for i, t in enumerate(body)])
    factors, pos = [], 0
    for s in shape:
        factors.append(vals[pos:pos + s * rank].reshape(s, rank))
        pos += s * rank
    return FactorModel(factors, nonneg=flag == "1")


# ---------------------------------------------------------------- configs

def config_to_dict(config: FitConfig) -> dict:
    d = asdict(config)
    d["mode"] = config.mode.value
    return d


def config_from_dict(d: dict) -> FitConfig:
    allowed = set(FitConfig.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise DomainError(f"unknown config keys: {sorted(unknown)}")
    if "rank" not in d:
        raise DomainError("config needs a rank")
    return FitConfig(**{**d, "mode": FitMode.parse(d.get("mode", "inexact"))})


def write_config(path, config: FitConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2) + "\n", encoding="utf-8")


def read_config(path) -> FitConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", f"line {exc.lineno}") from None
    if not isinstance(d, dict):
        raise ParseError("config must be a JSON object", "line 1")
    return config_from_dict(d)
