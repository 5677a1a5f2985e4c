"""Command-line entry point: ``accprec {vrr,predict,sweep-chunk,validate,net}``."""

from __future__ import annotations

import argparse
import io
import json
import math
import os
import re
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from accprec import __version__
from accprec.analytic import (
    CHUNK_RULES,
    DEFAULT_CUTOFF,
    MAX_BITS,
    AccumulationSpec,
    predict_min_mantissa,
    sweep_chunk_size,
    vrr,
    vrr_full_swamping,
)
from accprec.montecarlo import (
    DEFAULT_KNEE_THRESHOLD,
    ProductModel,
    empirical_knee,
    measure_vrr,
    read_csv,
    validation_row,
    write_csv,
)
from accprec.netpredict import TopologyError, apply_perturbation, builtin_topologies, load_topology, predict_network
from accprec.softfloat import RoundingMode

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_UNSATISFIABLE = 4

CSV_SCHEMA = "accprec-validation/1"
TABLE_SCHEMA = "accprec-precision-table/1"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------

_POW = re.compile(r"^\s*(\d+)\s*\^\s*(\d+)\s*$")


def _int_term(text: str) -> int:
    m = _POW.match(text)
    if m:
        return int(m.group(1)) ** int(m.group(2))
    return int(text)


def parse_grid(text: str) -> list[int]:
    """Parse ``"8,16,32"``, ``"4..9"`` or ``"2^1..2^22"`` (powers when both ends are powers)."""
    values: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo_s, hi_s = part.split("..", 1)
            lo_m, hi_m = _POW.match(lo_s), _POW.match(hi_s)
            if lo_m and hi_m and lo_m.group(1) == hi_m.group(1):
                base = int(lo_m.group(1))
                values.extend(base**e for e in range(int(lo_m.group(2)), int(hi_m.group(2)) + 1))
            else:
                values.extend(range(_int_term(lo_s), _int_term(hi_s) + 1))
        else:
            values.append(_int_term(part))
    if not values:
        raise ValueError(f"empty grid {text!r}")
    return values


def _grid_arg(text: str) -> list[int]:
    try:
        return parse_grid(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _length_arg(text: str) -> int:
    try:
        return _int_term(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None


def _mode_arg(text: str) -> RoundingMode:
    try:
        return RoundingMode.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------


def _manifest(command: str, params: dict, seed: Optional[int], schema: str) -> dict:
    return {
        "command": command,
        "parameters": params,
        "seed": seed,
        "tool_version": __version__,
        "schema": schema,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(path: Optional[str], data: str, manifest: dict) -> None:
    """Write ``data`` to ``path`` with a ``<path>.manifest.json`` sidecar, or to stdout."""
    if path is None:
        sys.stdout.write(data)
        return
    out = Path(path)
    _atomic_write(out, data)
    _atomic_write(out.with_name(out.name + ".manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _params(args: argparse.Namespace) -> dict:
    skip = {"func", "csv", "threads"}  # worker count never changes the data
    clean = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        if isinstance(value, RoundingMode):
            value = value.label
        clean[key] = value
    return clean


def _rows_csv(rows) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _specs_from(args) -> list[AccumulationSpec]:
    if args.grid_file:
        with open(args.grid_file, newline="") as fh:
            return read_csv(fh)
    ns = args.grid_n or ([args.n] if args.n is not None else None)
    maccs = args.grid_macc or ([args.macc] if args.macc is not None else None)
    if ns is None or maccs is None:
        raise ConfigError("give --n/--grid-n and --macc/--grid-macc, or --grid-file")
    return [AccumulationSpec(n, args.mp, m, args.chunk, args.nzr) for m in maccs for n in ns]


def cmd_vrr(args) -> int:
    specs = _specs_from(args)
    mode = RoundingMode.NEAREST_EVEN
    if args.csv or len(specs) > 1:
        rows = [validation_row(s, mode, 0, None) for s in specs]
        _emit(args.csv, _rows_csv(rows), _manifest("vrr", _params(args), None, CSV_SCHEMA))
        return EXIT_OK
    spec = specs[0]
    b = vrr(spec.m_acc, spec.m_p, spec.n)
    print(f"n={spec.n} m_p={spec.m_p} m_acc={spec.m_acc}")
    print(f"vrr             {b.vrr:.12g}")
    print(f"vrr_full_only   {vrr_full_swamping(spec.m_acc, spec.n):.12g}")
    print(f"alpha           {b.alpha:.12g}")
    print("alpha_jr        " + " ".join(f"{a:.6g}" for a in b.alpha_jr))
    print("q_prime         " + " ".join(f"{q:.6g}" for q in b.q_prime))
    print(f"k1 k2 k3 k      {b.k1:.6g} {b.k2:.6g} {b.k3:.6g} {b.k:.6g}")
    print(f"v_exponent      {b.variance_lost_exponent:.6g}  (cutoff ln {args.cutoff:g} = {math.log(args.cutoff):.6g})")
    if spec.chunked or spec.nzr < 1.0:
        from accprec.analytic import spec_vrr, variance_lost_exponent

        print(f"vrr_variant     {spec_vrr(spec):.12g}  (chunk={spec.chunk_size} nzr={spec.nzr:g})")
        print(f"v_exponent_var  {variance_lost_exponent(spec, args.chunk_rule):.6g}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ns = args.grid_n or [args.n]
    status = EXIT_OK
    lines = ["n,m_p,chunk,nzr,cutoff,m_acc,v_exponent"]
    for n in ns:
        pred = predict_min_mantissa(args.mp, n, args.chunk, args.nzr, args.cutoff,
                                    hi=args.max_bits, chunk_rule=args.chunk_rule)
        if not pred.satisfiable:
            status = EXIT_UNSATISFIABLE
            print(f"n={n}: unsatisfiable, no m_acc <= {args.max_bits} meets the cutoff", file=sys.stderr)
        lines.append(
            f"{n},{args.mp},{args.chunk or ''},{args.nzr!r},{args.cutoff!r},"
            f"{pred.min_m_acc if pred.satisfiable else ''},"
            f"{'' if pred.v_exponent_at_choice is None else repr(pred.v_exponent_at_choice)}"
        )
    if args.csv:
        _emit(args.csv, "\n".join(lines) + "\n", _manifest("predict", _params(args), None, "accprec-predict/1"))
    elif len(ns) == 1:
        pred_line = lines[1].split(",")
        print(pred_line[5] or "unsatisfiable")
    else:
        print("\n".join(lines))
    return status


def cmd_sweep_chunk(args) -> int:
    sweep = sweep_chunk_size(args.macc, args.mp, args.n, args.nzr, args.chunks)
    mode = RoundingMode.NEAREST_EVEN
    rows = [validation_row(AccumulationSpec(args.n, args.mp, args.macc, None, args.nzr), mode, 0, None)]
    rows += [
        validation_row(AccumulationSpec(args.n, args.mp, args.macc, r.chunk_size, args.nzr), mode, 0, None)
        for r in sweep.rows
    ]
    if args.csv:
        _emit(args.csv, _rows_csv(rows), _manifest("sweep-chunk", _params(args), None, CSV_SCHEMA))
    else:
        print(f"unchunked  {sweep.baseline:.10f}")
        for r in sweep.rows:
            print(f"n1={r.chunk_size:<8d} n2={r.n_chunks:<8d} {r.vrr:.10f}")
    return EXIT_OK


def cmd_validate(args) -> int:
    model = ProductModel(distribution=args.distribution, m_p=args.mp)
    ns = args.grid_n or [args.n]
    rows = []
    status = EXIT_OK
    report = []
    if args.knee:
        for n in ns:
            chunks = [None] + ([args.chunk] if args.chunk else [])
            for chunk in chunks:
                knee = empirical_knee(
                    args.mp, n, model, args.mode, args.threshold, trials=args.trials, seed=args.seed,
                    chunk_size=chunk, nzr=args.nzr, hi=args.max_bits, workers=args.threads,
                )
                pred = predict_min_mantissa(args.mp, n, chunk, args.nzr, args.cutoff,
                                            hi=args.max_bits, chunk_rule=args.chunk_rule)
                for m_acc, est in knee.estimates:
                    rows.append(validation_row(AccumulationSpec(n, args.mp, m_acc, chunk, args.nzr), args.mode, args.seed, est))
                if not (knee.satisfiable and pred.satisfiable):
                    status = EXIT_UNSATISFIABLE
                report.append(
                    f"n={n} chunk={chunk or '-'} empirical_knee={knee.m_acc} predicted={pred.min_m_acc} "
                    f"threshold={args.threshold:g}"
                )
    else:
        maccs = args.grid_macc or ([args.macc] if args.macc is not None else None)
        if maccs is None:
            raise ConfigError("validate needs --macc/--grid-macc (or --knee)")
        for n in ns:
            for m_acc in maccs:
                chunks = [None] + ([args.chunk] if args.chunk else [])
                for chunk in chunks:
                    spec = AccumulationSpec(n, args.mp, m_acc, chunk, args.nzr)
                    est = measure_vrr(spec, model, args.trials, args.seed, args.mode, workers=args.threads)
                    rows.append(validation_row(spec, args.mode, args.seed, est))
    data = _rows_csv(rows)
    if args.csv:
        _emit(args.csv, data, _manifest("validate", _params(args), args.seed, CSV_SCHEMA))
        for line in report:
            print(line)
    else:
        sys.stdout.write(data)
        for line in report:
            print(line, file=sys.stderr)
    return status


def cmd_net(args) -> int:
    try:
        net = load_topology(args.topology)
    except OSError as exc:
        raise ConfigError(str(exc)) from None
    table = predict_network(net)
    if args.pp:
        table = apply_perturbation(table, args.pp)
    if args.blocks:
        table = table.block_max()
    status = EXIT_UNSATISFIABLE if any(
        not r.excluded and (r.m_acc_normal is None or r.m_acc_chunked is None) for r in table.rows
    ) else EXIT_OK
    if args.csv:
        _emit(args.csv, table.to_csv(), _manifest("net", _params(args), None, TABLE_SCHEMA))
    else:
        print(table.to_text())
    return status


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, *, grids: bool = True) -> None:
    p.add_argument("--mp", type=int, default=5, help="product mantissa bits (default 5)")
    p.add_argument("--n", type=_length_arg, help="accumulation length, e.g. 65536 or 2^16")
    p.add_argument("--chunk", type=int, default=None, help="chunk size n1 (default: no chunking)")
    p.add_argument("--nzr", type=float, default=1.0, help="non-zero ratio of the terms")
    p.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF, help="variance-lost cutoff (default 50)")
    p.add_argument("--chunk-rule", choices=CHUNK_RULES, default="levels")
    p.add_argument("--max-bits", type=int, default=MAX_BITS, help="search ceiling for m_acc (default 32)")
    p.add_argument("--csv", default=None, help="write CSV here (plus a .manifest.json sidecar)")
    if grids:
        p.add_argument("--grid-n", type=_grid_arg, default=None, help="length grid, e.g. 2^1..2^22")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="accprec", description=__doc__)
    parser.add_argument("--version", action="version", version=f"accprec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vrr", help="evaluate the variance retention ratio")
    _add_common(p)
    p.add_argument("--macc", type=int, default=None, help="accumulator mantissa bits")
    p.add_argument("--grid-macc", type=_grid_arg, default=None)
    p.add_argument("--grid-file", default=None, help="CSV of (n, m_p, m_acc[, chunk, nzr]) rows")
    p.set_defaults(func=cmd_vrr)

    p = sub.add_parser("predict", help="minimum accumulator mantissa for a length")
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep-chunk", help="VRR as a function of chunk size")
    _add_common(p, grids=False)
    p.add_argument("--macc", type=int, required=True)
    p.add_argument("--chunks", type=_grid_arg, default=parse_grid("2^1..2^12"))
    p.set_defaults(func=cmd_sweep_chunk)

    p = sub.add_parser("validate", help="Monte Carlo check of the VRR against the emulator")
    _add_common(p)
    p.add_argument("--macc", type=int, default=None)
    p.add_argument("--grid-macc", type=_grid_arg, default=None)
    p.add_argument("--knee", action="store_true", help="locate the empirical knee and compare with the prediction")
    p.add_argument("--threshold", type=float, default=DEFAULT_KNEE_THRESHOLD, help="retention threshold for --knee")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", type=_mode_arg, default=RoundingMode.NEAREST_EVEN,
                   help="nearest_even or truncate")
    p.add_argument("--distribution", choices=("gaussian_product", "gaussian"), default="gaussian_product")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default $ACCPREC_THREADS or 1)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("net", help="precision table for a network topology")
    p.add_argument("topology", help="topology YAML path or bundled name: " + ", ".join(builtin_topologies()))
    p.add_argument("--pp", type=int, default=0, help="precision perturbation (<= 0)")
    p.add_argument("--blocks", action="store_true", help="one row per block (max over its layers)")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_net)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if getattr(args, "n", None) is None and getattr(args, "grid_n", None) is None and args.command in ("predict", "sweep-chunk"):
        parser.error_message = None
        print(f"accprec {args.command}: --n is required", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "pp", 0) > 0:
        print("accprec net: --pp must be <= 0", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, TopologyError) as exc:
        print(f"accprec {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"accprec {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
