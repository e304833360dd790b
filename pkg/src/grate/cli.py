"""``grate`` command line: synth, fit, eval and cv subcommands.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 fit did not converge.
"""
import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

from .aggregation import AggregationKind, CompoundTensor
from .engine import FitConfig, FitMode, fit_multistart, ntf_baseline
from .errors import ConvergenceError, GrateError
from .experiments import (EnergyTensorMeta, ExperimentSpec, HiddenFibers, HiddenHomes,
                          cv_select_rank, format_table, run_experiment, sweep_fibers,
                          synth_generate)
from .io import read_long_csv, read_tensor, write_model, write_tensor

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2, 3
DEFAULT_RANKS = {"inexact": 23, "ntf": 18, "exact": 18}

log = logging.getLogger("grate")


class UsageError(Exception):
    """Flag value that parses but is not acceptable."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- flag parsing

def parse_shape(text: str):
    parts = text.lower().split("x")
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid shape {text!r}; use e.g. 7x103x12x4") from None
    if len(shape) < 2 or any(s < 1 for s in shape):
        raise argparse.ArgumentTypeError(f"invalid shape {text!r}; use e.g. 7x103x12x4")
    return shape


def parse_protocol(text: str):
    kind, _, arg = text.partition(":")
    try:
        if kind == "fibers":
            f = float(arg)
            if not 0.0 <= f <= 1.0:
                raise ValueError
            return HiddenFibers(f)
        if kind == "homes":
            if arg.isdigit():
                return HiddenHomes(count=int(arg))
            ids = [s for s in arg.split(",") if s]
            if not ids:
                raise ValueError
            return HiddenHomes(home_ids=ids)
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(
        f"invalid protocol {text!r}; use fibers:<fraction in [0,1]> or homes:<count|id,id,...>")


def parse_ranks(text: str):
    try:
        if ".." in text:
            lo, hi = (int(p) for p in text.split(".."))
            ranks = list(range(lo, hi + 1))
        else:
            ranks = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid rank list {text!r}; use 10..30 or 5,10") from None
    if not ranks or min(ranks) < 1:
        raise argparse.ArgumentTypeError(f"invalid rank list {text!r}")
    return ranks


def _fraction_open(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"holdout must lie strictly between 0 and 1, got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text}")
    return v


def add_fit_flags(p):
    p.add_argument("--mode", choices=["exact", "inexact", "ntf"], default="inexact")
    p.add_argument("--rank", type=_positive_int, help="default: 23 inexact, 18 ntf or exact")
    p.add_argument("--nonneg", action="store_true")
    p.add_argument("--max-iters", type=_positive_int, default=200)
    p.add_argument("--tol", type=float, default=1e-6, help="relative cost change to stop at")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--starts", type=_positive_int, default=1)
    p.add_argument("--merge-time-modes", action="store_true",
                   help="ntf only: merge the last two modes (three-way baseline)")
    p.add_argument("--allow-maxiters", action="store_true",
                   help="exit 0 even if the iteration cap was reached")


def config_from_flags(a) -> FitConfig:
    rank = a.rank or DEFAULT_RANKS[a.mode]
    nonneg = a.nonneg or a.mode == "ntf"
    if not a.tol > 0:
        raise UsageError("--tol must be positive")
    return FitConfig(rank=rank, mode=FitMode.parse(a.mode), nonneg=nonneg,
                     max_iters=a.max_iters, rel_tol=a.tol, seed=a.seed)


def build_parser():
    p = _Parser(prog="grate", description="Aggregation-constrained tensor completion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic ground truth, compound tensor and model")
    s.add_argument("--shape", type=parse_shape, required=True, help="compound shape, e.g. 7x103x12x4")
    s.add_argument("--rank", type=_positive_int, required=True)
    s.add_argument("--kind", choices=["exact", "inexact"], default="exact")
    s.add_argument("--noise", type=_nonneg_float, default=0.0)
    s.add_argument("--residual", type=_nonneg_float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-prefix", required=True)

    f = sub.add_parser("fit", help="fit a CPD model to a tensor or CSV")
    f.add_argument("--input", required=True, help="GRT1 tensor or long-format CSV")
    f.add_argument("--kind", choices=["exact", "inexact"],
                   help="aggregation kind of a GRT1 input (default: follows --mode)")
    add_fit_flags(f)
    f.add_argument("--out", required=True, help="GRM1 model output")
    f.add_argument("--trace", help="JSON fit trace output")

    e = sub.add_parser("eval", help="hide data, fit, and score the hidden entries")
    e.add_argument("--truth", help="GRT1 detailed ground truth (default: the compound's own data)")
    e.add_argument("--compound", required=True, help="GRT1 compound tensor or long-format CSV")
    e.add_argument("--kind", choices=["exact", "inexact"], default="inexact")
    e.add_argument("--protocol", type=parse_protocol, required=True)
    e.add_argument("--sweep", help="comma-separated fiber fractions for an NMSE curve")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--fit-args", default="", help='fit flags, e.g. "--mode inexact --rank 23"')
    e.add_argument("--baseline", choices=["ntf", "ntf4"])
    e.add_argument("--baseline-rank", type=_positive_int)
    e.add_argument("--report", required=True)
    e.add_argument("--table")
    e.add_argument("--plot", help="SVG with the fit trace and, with --sweep, the NMSE curve")

    c = sub.add_parser("cv", help="pick a rank by hold-out NMSE")
    c.add_argument("--input", required=True)
    c.add_argument("--kind", choices=["exact", "inexact"])
    c.add_argument("--ranks", type=parse_ranks, required=True)
    c.add_argument("--holdout", type=_fraction_open, default=0.1)
    add_fit_flags(c)
    return p


# ---------------------------------------------------------------- commands

def _load_compound(path, kind):
    if str(path).lower().endswith(".csv"):
        compound, meta = read_long_csv(path)
        if kind is not None:
            compound = CompoundTensor(compound.data, compound.mask, kind)
        return compound, meta
    data, mask = read_tensor(path)
    return CompoundTensor(data, mask, kind or AggregationKind.INEXACT), None


def _input_kind(a):
    if a.kind:
        return AggregationKind(a.kind)
    return AggregationKind.EXACT if a.mode == "exact" else None


def cmd_synth(a):
    truth, model, compound = synth_generate(a.shape, a.rank, a.kind, a.noise, a.residual, a.seed)
    write_tensor(f"{a.out_prefix}.truth.grt", truth)
    write_tensor(f"{a.out_prefix}.compound.grt", compound.data, compound.mask)
    write_model(f"{a.out_prefix}.model.grm", model)
    return EXIT_OK


def _status(trace, allow_maxiters):
    if trace.converged or allow_maxiters:
        return EXIT_OK
    print(f"fit stopped without converging ({trace.reason}); pass --allow-maxiters to accept",
          file=sys.stderr)
    return EXIT_NOT_CONVERGED


def cmd_fit(a):
    config = config_from_flags(a)
    compound, _ = _load_compound(a.input, _input_kind(a))
    if a.mode == "ntf":
        model, trace = ntf_baseline(compound, config, a.merge_time_modes, a.starts)
    else:
        model, trace = fit_multistart(compound, config, a.starts)
    write_model(a.out, model)
    if a.trace:
        Path(a.trace).write_text(json.dumps(trace.to_dict(), indent=1) + "\n")
    return _status(trace, a.allow_maxiters)


def _plot(path, reports, sweep):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = 2 if sweep else 1
    fig, axes = plt.subplots(1, panels, figsize=(5 * panels, 3.6), squeeze=False)
    ax = axes[0, 0]
    for name, m in reports[-1]["methods"].items():
        ax.semilogy(m["fit"]["costs"], label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("masked squared error")
    ax.legend()
    if sweep:
        ax = axes[0, 1]
        for name in reports[0]["methods"]:
            ax.plot([100 * f for f in sweep],
                    [r["methods"][name]["total_nmse"] for r in reports], marker="o", label=name)
        ax.set_xlabel("missing fibers (%)")
        ax.set_ylabel("NMSE")
        ax.legend()
    fig.tight_layout()
    # fixed hash salt and no date keep the SVG deterministic
    matplotlib.rcParams["svg.hashsalt"] = "grate"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_eval(a):
    fa = _Parser(prog="grate eval --fit-args")
    add_fit_flags(fa)
    try:
        fit_args = fa.parse_args(shlex.split(a.fit_args))
    except ValueError as exc:
        raise UsageError(f"--fit-args: {exc}") from None
    config = config_from_flags(fit_args)
    if fit_args.mode == "ntf":
        raise UsageError("--fit-args selects the method under test; use --baseline for NTF")
    sweep = None
    if a.sweep:
        try:
            sweep = [float(s) for s in a.sweep.split(",")]
        except ValueError:
            raise UsageError(f"invalid --sweep {a.sweep!r}") from None
        if any(not 0.0 <= f <= 1.0 for f in sweep):
            raise UsageError("--sweep fractions must lie in [0, 1]")

    compound, meta = _load_compound(a.compound, AggregationKind(a.kind))
    if meta is None:
        meta = EnergyTensorMeta.default(compound.shape)
    truth, truth_mask = None, None
    if a.truth:
        truth, truth_mask = read_tensor(a.truth)

    spec = ExperimentSpec(a.protocol, config, a.seed, fit_args.starts, a.baseline, a.baseline_rank)
    if sweep:
        reports = sweep_fibers(compound, meta, sweep, spec, truth, truth_mask)
    else:
        reports = [run_experiment(compound, meta, spec, truth, truth_mask)]
    doc = reports[0] if len(reports) == 1 else {"sweep": sweep, "reports": reports}
    Path(a.report).write_text(json.dumps(doc, indent=1) + "\n")
    if a.table:
        Path(a.table).write_text("\n".join(format_table(r) for r in reports))
    if a.plot:
        _plot(a.plot, reports, sweep)
    converged = all(m["fit"]["reason"] in ("converged", "exact_fit")
                    for r in reports for m in r["methods"].values())
    if converged or fit_args.allow_maxiters:
        return EXIT_OK
    print("a fit stopped at its iteration cap; pass --allow-maxiters in --fit-args to accept",
          file=sys.stderr)
    return EXIT_NOT_CONVERGED


def cmd_cv(a):
    config = config_from_flags(a)
    if a.mode == "ntf":
        raise UsageError("cv selects a rank for the exact or inexact fit")
    compound, _ = _load_compound(a.input, _input_kind(a))
    best, scores = cv_select_rank(compound, a.ranks, config, a.holdout, a.seed, a.starts)
    for r in sorted(scores):
        print(f"rank {r:3d}  holdout NMSE {scores[r]:.6g}")
    print(f"best rank {best}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "eval": cmd_eval, "cv": cmd_cv}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"grate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"grate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as exc:
        print(f"grate {args.command}: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (GrateError, OSError) as exc:
        print(f"grate {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
