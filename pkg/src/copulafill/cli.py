"""Command-line front end: fit/impute, streaming, and evaluation over CSV.

Exit codes: 0 success, 1 flag validation, 2 input parse failure, 3 fit or
numeric failure. Output CSVs keep the input header and column order; floats
are printed with 6 significant digits.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .copula_em import FitConfig, fit_minibatch_offline, fit_standard
from .data_model import (
    DataTable,
    _parse_cell,
    format_cell,
    parse_type_overrides,
    read_csv,
    write_csv,
)
from .evaluation import coverage, mae, smae
from .imputer import confidence_intervals, impute_multiple, impute_single
from .lrgc import fit_lrgc
from .streaming import StreamConfig, init_stream, step


class CliError(Exception):
    """Flag/semantic validation failure (exit 1)."""


class ParseError(Exception):
    """Input file parse failure (exit 2)."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copulafill",
        description="Gaussian copula imputation for incomplete mixed-type CSV tables",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    imp = sub.add_parser("impute", formatter_class=fmt,
                         help="fit a model and write the imputed CSV")
    imp.add_argument("input", help="input CSV (header required; missing = empty or NaN)")
    imp.add_argument("-o", "--output", required=True, help="imputed CSV path")
    imp.add_argument("--mode", default="standard",
                     choices=["standard", "minibatch-offline", "minibatch-online"],
                     help="training mode")
    imp.add_argument("--tol", type=float, default=0.01, help="EM convergence tolerance")
    imp.add_argument("--max-iter", type=int, default=50, help="maximum EM iterations")
    imp.add_argument("--batch-size", type=int, default=100, help="mini-batch size")
    imp.add_argument("--num-pass", type=int, default=2,
                     help="data passes for minibatch-offline")
    imp.add_argument("--stepsize-c", type=float, default=5.0,
                     help="c in the step size schedule c/(c+t)")
    imp.add_argument("--rank", type=int, default=0,
                     help="if > 0, fit the low-rank model with this rank")
    imp.add_argument("--min-ord-ratio", type=float, default=0.1,
                     help="mode-frequency threshold for type detection")
    imp.add_argument("--types", default="",
                     help="comma list of per-column type overrides (empty = auto)")
    imp.add_argument("--alpha", type=float, default=0.05,
                     help="confidence level for --ci is 1 - alpha")
    imp.add_argument("--ci", default="", choices=["", "analytic", "quantile"],
                     help="also write <output>_ci_lower/upper.csv")
    imp.add_argument("--multiple", type=int, default=0, metavar="N",
                     help="also write N sampled imputations <output>_impK.csv")
    imp.add_argument("--corr-out", default="", help="write the fitted correlation CSV")
    imp.add_argument("--seed", type=int, default=0, help="random seed")
    imp.add_argument("--workers", type=int, default=1, help="E-step worker processes")
    imp.add_argument("--verbose", action="store_true", help="print per-iteration lines")

    st = sub.add_parser("stream", formatter_class=fmt,
                        help="impute rows line by line (file or -, stdin)")
    st.add_argument("input", help="input CSV path or - for stdin")
    st.add_argument("-o", "--output", default="-", help="output CSV path or - for stdout")
    st.add_argument("--truth", default="",
                    help="CSV of revealed rows; must agree at observed cells")
    st.add_argument("--window-size", type=int, default=200,
                    help="marginal window length")
    st.add_argument("--const-stepsize", type=float, default=0.1,
                    help="constant correlation step size")
    st.add_argument("--batch-size", type=int, default=40,
                    help="rows per correlation update")
    st.add_argument("--decay", type=float, default=1.0,
                    help="imputation decay weight in (0, 1]")
    st.add_argument("--n-train", type=int, default=25,
                    help="warmup rows used to initialize the model")
    st.add_argument("--min-ord-ratio", type=float, default=0.1,
                    help="mode-frequency threshold for type detection")
    st.add_argument("--types", default="",
                    help="comma list of per-column type overrides (empty = auto)")

    ev = sub.add_parser("evaluate", formatter_class=fmt,
                        help="score imputations against withheld truth")
    ev.add_argument("--truth", required=True, help="complete ground-truth CSV")
    ev.add_argument("--masked", required=True, help="masked input CSV")
    ev.add_argument("--imputed", required=True, help="imputed CSV to score")
    ev.add_argument("--ci-lower", default="", help="lower CI bound CSV")
    ev.add_argument("--ci-upper", default="", help="upper CI bound CSV")
    return parser


def _read_table(path: str) -> DataTable:
    try:
        return read_csv(path)
    except (OSError, ValueError) as err:
        raise ParseError(f"{path}: {err}") from None


def _derived_path(output: str, suffix: str) -> Path:
    out = Path(output)
    return out.with_name(out.stem + suffix + out.suffix)


def _cmd_impute(args) -> int:
    if args.mode == "minibatch-online":
        raise CliError("use the 'stream' command for minibatch-online mode")
    if args.multiple < 0:
        raise CliError("--multiple must be nonnegative")
    if not 0 < args.alpha < 1:
        raise CliError("--alpha must be in (0, 1)")
    try:
        config = FitConfig(
            tol=args.tol,
            max_iter=args.max_iter,
            training_mode=args.mode,
            batch_size=args.batch_size,
            num_pass=args.num_pass,
            stepsize=lambda t, c=args.stepsize_c: c / (c + t),
            seed=args.seed,
            n_workers=args.workers,
            verbose=args.verbose,
        )
    except ValueError as err:
        raise CliError(str(err)) from None

    table = _read_table(args.input)
    try:
        types = (parse_type_overrides(args.types, table.n_cols)
                 if args.types else None)
        # width-dependent preconditions are still flag validation
        if args.mode == "minibatch-offline" and args.batch_size < table.n_cols:
            raise ValueError(
                f"mini-batch training needs batch size >= number of columns "
                f"({args.batch_size} < {table.n_cols}); use --rank for wide data"
            )
        if args.rank and not 1 <= args.rank < table.n_cols:
            raise ValueError(
                f"--rank must satisfy 1 <= rank < n_cols, got {args.rank} "
                f"(n_cols={table.n_cols})"
            )
    except ValueError as err:
        raise CliError(str(err)) from None

    try:
        if args.rank > 0:
            model = fit_lrgc(table, args.rank, config, types=types,
                             min_ord_ratio=args.min_ord_ratio)
        elif args.mode == "minibatch-offline":
            model = fit_minibatch_offline(table, config, types=types,
                                          min_ord_ratio=args.min_ord_ratio)
        else:
            model = fit_standard(table, config, types=types,
                                 min_ord_ratio=args.min_ord_ratio)
        result = impute_single(model, table)
    except (ValueError, np.linalg.LinAlgError) as err:
        print(f"copulafill: fit failed: {err}", file=sys.stderr)
        return 3

    write_csv(args.output, result.imputed, table.col_names)
    if args.ci:
        lo, hi = confidence_intervals(model, table, alpha=args.alpha,
                                      kind=args.ci, seed=args.seed)
        write_csv(_derived_path(args.output, "_ci_lower"), lo, table.col_names)
        write_csv(_derived_path(args.output, "_ci_upper"), hi, table.col_names)
    if args.multiple:
        draws = impute_multiple(model, table, num=args.multiple, seed=args.seed)
        for k in range(args.multiple):
            write_csv(_derived_path(args.output, f"_imp{k + 1}"), draws[k],
                      table.col_names)
    if args.corr_out:
        write_csv(args.corr_out, model.correlation(), table.col_names)
    return 0


def _iter_csv_rows(fh, n_cols, names, start=0):
    reader = csv.reader(fh)
    for i, rec in enumerate(reader, start=start):
        if not rec:
            continue
        if len(rec) != n_cols:
            raise ParseError(f"row {i + 1} has {len(rec)} fields, expected {n_cols}")
        yield np.array([_parse_cell(tok, i, names[j]) for j, tok in enumerate(rec)])


def _cmd_stream(args) -> int:
    try:
        config = StreamConfig(
            window_size=args.window_size,
            const_stepsize=args.const_stepsize,
            batch_size=args.batch_size,
            decay=args.decay,
            n_train=args.n_train,
        )
    except ValueError as err:
        raise CliError(str(err)) from None

    in_fh = sys.stdin if args.input == "-" else open(args.input, newline="",
                                                     encoding="utf-8")
    truth_fh = open(args.truth, newline="", encoding="utf-8") if args.truth else None
    out_fh = sys.stdout if args.output == "-" else open(args.output, "w",
                                                        newline="", encoding="utf-8")
    try:
        return _run_stream(args, config, in_fh, truth_fh, out_fh)
    finally:
        for fh in (in_fh, truth_fh, out_fh):
            if fh not in (sys.stdin, sys.stdout, None):
                fh.close()


def _run_stream(args, config, in_fh, truth_fh, out_fh) -> int:
    try:
        header = next(csv.reader(in_fh))
    except StopIteration:
        raise ParseError(f"{args.input}: empty CSV: a header row is required") from None
    names = [h.strip() for h in header]
    p = len(names)
    try:
        types = parse_type_overrides(args.types, p) if args.types else None
    except ValueError as err:
        raise CliError(str(err)) from None

    rows = _iter_csv_rows(in_fh, p, names)
    if truth_fh is not None:
        next(csv.reader(truth_fh))  # skip header
        truth_rows = _iter_csv_rows(truth_fh, p, names)
    else:
        truth_rows = None

    writer = csv.writer(out_fh, lineterminator="\n")
    writer.writerow(names + ["warmup"])

    warmup_in, warmup_train = [], []
    for _ in range(config.n_train):
        try:
            row = next(rows)
        except StopIteration:
            raise ParseError(
                f"{args.input}: fewer rows than --n-train={config.n_train}"
            ) from None
        train_row = next(truth_rows) if truth_rows is not None else row
        warmup_in.append(row)
        warmup_train.append(train_row)
        writer.writerow([format_cell(x) for x in row] + ["1"])
    out_fh.flush()

    try:
        state = init_stream(np.vstack(warmup_train), config, types=types,
                            min_ord_ratio=args.min_ord_ratio)
    except ValueError as err:
        print(f"copulafill: stream initialization failed: {err}", file=sys.stderr)
        return 3

    for row in rows:
        revealed = next(truth_rows) if truth_rows is not None else None
        try:
            imputed, state = step(state, row, revealed)
        except ValueError as err:
            print(f"copulafill: stream step failed: {err}", file=sys.stderr)
            return 3
        writer.writerow([format_cell(x) for x in imputed] + ["0"])
        out_fh.flush()
    return 0


def _cmd_evaluate(args) -> int:
    truth = _read_table(args.truth)
    masked = _read_table(args.masked)
    imputed = _read_table(args.imputed)
    scores = smae(imputed, truth, masked)
    print(f"{'column':<20} {'smae':>8}")
    for name, s in zip(truth.col_names, scores):
        shown = f"{s:.3f}" if np.isfinite(s) else "n/a"
        print(f"{name:<20} {shown:>8}")
    mean_smae = np.nanmean(scores) if np.isfinite(scores).any() else float("nan")
    print(f"{'mean smae':<20} {mean_smae:>8.3f}")
    print(f"{'pooled mae':<20} {mae(imputed, truth, masked):>8.3f}")
    if args.ci_lower and args.ci_upper:
        lo = _read_table(args.ci_lower)
        hi = _read_table(args.ci_upper)
        print(f"coverage: {coverage(lo, hi, truth, masked):.3f}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; classify them as flag validation
        return 0 if exc.code in (0, None) else 1
    handlers = {
        "impute": _cmd_impute,
        "stream": _cmd_stream,
        "evaluate": _cmd_evaluate,
    }
    try:
        return handlers[args.command](args)
    except CliError as err:
        print(f"copulafill: {err}", file=sys.stderr)
        return 1
    except ParseError as err:
        print(f"copulafill: parse failure: {err}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        # downstream consumer closed the stream (e.g. head); exit quietly
        import os

        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
