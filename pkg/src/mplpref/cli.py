"""Command-line interface: ``mplpref <command> [flags]``.

Exit codes: 0 success, 1 computational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import MplPrefError, UnsupportedCurvature
from .mpl import STANDARD_IDS, implied_column, normalize_list_id, round_half_up, standard_lists_by_id

THREADS_ENV = "MPLPREF_THREADS"
# risk premium of the benchmark lottery as printed alongside the pooled estimates
PUBLISHED_PREMIUM = 22.16


class UsageError(Exception):
    pass


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _emit(df: pd.DataFrame, fmt: str) -> None:
    if fmt == "csv":
        df.to_csv(sys.stdout, index=False)
    else:
        print(df.to_string(index=False))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_implied(args) -> int:
    lists = standard_lists_by_id()
    if args.all:
        ids = list(STANDARD_IDS)
    else:
        lid = normalize_list_id(args.list)
        if lid not in lists:
            raise UsageError(f"unknown list id {args.list!r}; choose from {', '.join(STANDARD_IDS)}")
        ids = [lid]
    rows = []
    for lid in ids:
        for r, v in zip(lists[lid].rows, implied_column(lists[lid])):
            rows.append({"list_id": lid, "row": r.index, "implied": f"{round_half_up(v, 3):.3f}"})
    _emit(pd.DataFrame(rows), args.format)
    return 0


def cmd_estimate(args) -> int:
    from .dataio import RunConfig, load_dataset
    from .estimate import maximize, parse_restriction, wald_test

    try:
        run = RunConfig.from_json(args.config)
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    out = Path(args.output_dir or run.output_dir)
    ds, report = load_dataset(run)
    spec = run.model_spec(ds.covariate_names)
    cfg = run.optimizer_config()
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    res = maximize(ds, spec, cfg=cfg, threads=args.threads)
    extra = {"ingestion": report.as_dict(), "seed": cfg.seed, "dataset_digest": ds.digest()}
    lines = [res.summary()]
    if args.wald:
        R, r = parse_restriction(args.wald, res.labels)
        stat, p = wald_test(res, R, r)
        lines.append(f"Wald {args.wald}: chi2({R.shape[0]}) = {stat:.3f}, p = {p:.4g}")
        extra["wald"] = {"restriction": args.wald, "statistic": stat, "p_value": p, "df": int(R.shape[0])}
    out.mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "results.csv")
    res.to_json(out / "manifest.json", extra)
    print("\n".join(lines))
    if not res.converged:
        print(f"estimation did not converge: {res.status}", file=sys.stderr)
        return 1
    return 0


def cmd_simulate(args) -> int:
    from .dataio import export_dataset
    from .simulate import SimConfig, simulate_dataset

    cfg = SimConfig(n_subjects=args.subjects, n_replications=args.replication + 1, seed=args.seed)
    ds, draws = simulate_dataset(cfg, args.replication)
    out = Path(args.output_dir)
    export_dataset(ds, out)
    draws.to_csv(out / "draws.csv", index=False, float_format="%.10g")
    print(f"wrote {ds.n_respondents} subjects, {ds.n_choices} choices to {out}")
    return 0


def cmd_spurious(args) -> int:
    from .simulate import SimConfig, run_spurious_experiment

    cfg = SimConfig(n_subjects=args.subjects, n_replications=args.replications, seed=args.seed)
    rep = run_spurious_experiment(cfg, threads=args.threads)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out / "spurious.csv")
    rep.summary_table().to_csv(out / "spurious_summary.csv", index=False)
    print(rep.summary_text())
    failed = rep.failed_replications()
    if failed:
        print(f"failed replications: {failed}", file=sys.stderr)
    return 0 if len(failed) <= args.replications / 2 else 1


def _parse_lottery(text: str):
    from .mpl import Option, Outcome

    outcomes = []
    for part in text.split(","):
        amount, _, prob = part.partition(":")
        try:
            outcomes.append(Outcome(float(amount), float(prob)))
        except ValueError as exc:
            raise UsageError(f"bad lottery term {part!r}: {exc}") from None
    try:
        return Option(tuple(outcomes))
    except ValueError as exc:
        raise UsageError(f"bad lottery: {exc}") from None


def cmd_premium(args) -> int:
    from .prefmodel import BENCHMARK_LOTTERY, certainty_equivalent, risk_premium

    lottery = _parse_lottery(args.lottery) if args.lottery else BENCHMARK_LOTTERY
    try:
        ce = certainty_equivalent(lottery, args.alpha)
    except (ValueError, UnsupportedCurvature) as exc:
        raise UsageError(str(exc)) from None
    # rounding first avoids printing -0.00
    prem = round(risk_premium(lottery, args.alpha), 2) + 0.0
    print(f"{prem:.2f}")
    if args.verbose:
        print(f"certainty equivalent {ce:.4f}", file=sys.stderr)
    if args.note_paper:
        print(f"note: published premium {PUBLISHED_PREMIUM:.2f} was computed from the unrounded "
              f"alpha estimate; the rounded alpha gives {prem:.2f}")
    return 0


def cmd_fixture(args) -> int:
    from .dataio import make_fixture
    from .prefmodel import POOLED_ESTIMATES, ParamVector

    truth = POOLED_ESTIMATES
    if args.truth:
        try:
            truth = ParamVector(**{k: float(v) for k, v in (kv.split("=") for kv in args.truth.split(","))})
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad --truth: {exc}") from None
    paths = make_fixture(args.output_dir, args.seed, args.subjects, truth)
    for k, p in paths.items():
        print(f"{k}: {p}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mplpref", description="Preference estimation from price-list choices.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--output-dir", default=None)
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--threads", type=_positive_int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")

    sp = sub.add_parser("implied", help="implied-parameter columns of the standard lists")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--list")
    g.add_argument("--all", action="store_true")
    sp.add_argument("--format", choices=("csv", "text"), default="csv")
    sp.set_defaults(func=cmd_implied)

    sp = sub.add_parser("estimate", help="fit a model described by a JSON run config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--wald", help="linear restriction on intercepts, e.g. delta1=delta2")
    common(sp, seed_default=None)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("simulate", help="simulate one dataset from the default generating process")
    sp.add_argument("--subjects", type=_nonneg_int, default=12_000)
    sp.add_argument("--replication", type=_nonneg_int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("spurious", help="run the noise-driven spurious-correlation experiment")
    sp.add_argument("--replications", type=_positive_int, default=20)
    sp.add_argument("--subjects", type=_positive_int, default=12_000)
    common(sp)
    sp.set_defaults(func=cmd_spurious)

    sp = sub.add_parser("premium", help="risk premium of a lottery under CRRA utility")
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--lottery", help="comma-separated amount:probability terms (default 0:0.5,100:0.5)")
    sp.add_argument("--note-paper", action="store_true", help="compare with the published premium")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_premium)

    sp = sub.add_parser("fixture", help="write a synthetic fixture with known parameters")
    sp.add_argument("--subjects", type=_nonneg_int, default=100)
    sp.add_argument("--truth", help="comma-separated name=value overrides, e.g. alpha=0.4,kappa=0.3")
    common(sp)
    sp.set_defaults(func=cmd_fixture)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "threads", 1) is None:
            args.threads = _default_threads()
        if hasattr(args, "output_dir") and args.output_dir is None and args.command != "estimate":
            args.output_dir = "."
        return args.func(args)
    except UsageError as exc:
        print(f"mplpref {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MplPrefError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        print(f"mplpref {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
