"""Batch command-line front end.

Five commands: `rsvd` and `svd` factorize Matrix Market files into block
exports plus a plain-text singular value list, `compress-image` runs the
low-rank greyscale demo, `resume` finishes an interrupted plan, and `info`
summarizes an input without reading its body. Exit codes partition the
error space: 2 usage, 3 malformed input, 4 memory budget, 5 I/O, 6 no plan
to resume, 7 configuration mismatch on resume.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from .core import Density, IndexWidth, Precision
from .errors import (
    BudgetError,
    ConfigMismatchError,
    ConvergenceError,
    FormatError,
    ParseError,
    PlanNotFoundError,
    ShapeError,
)
from .formats import read_matrix_market_info
from .pipeline import (
    STAGE_NAMES,
    STAGE_POST,
    MemoryBudget,
    RsvdConfig,
    resume as resume_plan,
    run_command,
)
from .planner import partition_for_budget

_SUFFIX = {"k": 1 << 10, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}


def parse_bytes(text: str) -> int:
    """Byte count with optional binary K/M/G suffix."""
    raw = text.strip()
    scale = 1
    if raw and raw[-1] in _SUFFIX:
        scale = _SUFFIX[raw[-1]]
        raw = raw[:-1]
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a byte count: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"byte count must be positive: {text!r}")
    return value * scale


def _add_budget_flags(p: argparse.ArgumentParser):
    p.add_argument("--memory-per-matrix", type=parse_bytes, default=None, metavar="BYTES")
    p.add_argument("--memory-new", type=parse_bytes, default=None, metavar="BYTES")
    p.add_argument("--memory-global", type=parse_bytes, default=None, metavar="BYTES")


def _add_run_flags(p: argparse.ArgumentParser, *, with_rank: bool):
    if with_rank:
        p.add_argument("--rank", type=int, required=True)
        p.add_argument("--power", choices=["auto", "0", "1", "2", "3", "4", "5"], default="auto")
    p.add_argument("--precision", choices=["half", "single", "double"], default="double")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    _add_budget_flags(p)
    p.add_argument("--workdir", default=None)
    p.add_argument("--profile-out", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="xsvd", description="Out-of-core randomized SVD for matrices larger than memory."
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rsvd", help="randomized rank-r factorization of a Matrix Market file")
    p.add_argument("input")
    p.add_argument("outdir")
    _add_run_flags(p, with_rank=True)

    p = sub.add_parser("svd", help="exact thin SVD (small minimum dimension)")
    p.add_argument("input")
    p.add_argument("outdir")
    _add_run_flags(p, with_rank=False)

    p = sub.add_parser("compress-image", help="low-rank PGM reconstruction demo")
    p.add_argument("input")
    p.add_argument("output")
    _add_run_flags(p, with_rank=True)

    p = sub.add_parser("resume", help="finish an interrupted factorization")
    p.add_argument("workdir")

    p = sub.add_parser("info", help="summarize a Matrix Market file without reading its body")
    p.add_argument("input")
    _add_budget_flags(p)

    return ap


def _usage_error(message: str) -> int:
    print(f"usage error: {message}", file=sys.stderr)
    return 2


def _human_bytes(n: int) -> str:
    for unit, width in (("TB", 1 << 40), ("GB", 1 << 30), ("MB", 1 << 20), ("KB", 1 << 10)):
        if n >= width:
            return f"{n / width:.2f} {unit}"
    return f"{n} B"


def _write_profile(path: str, wall: float, result, pool, runner):
    lines = [f"{name}\t{result.stage_seconds[name]:.6f}" for name in STAGE_NAMES]
    lines.append(f"total-wall-seconds\t{wall:.6f}")
    lines.append(f"peak-resident-bytes\t{pool.tracker.global_peak}")
    for stage in STAGE_NAMES:
        if stage in runner.stage_threads:
            lines.append(f"threads[{stage}]\t{runner.stage_threads[stage]}")
    for matrix_id, desc in sorted(pool.known_matrices().items()):
        part = desc.partition
        lines.append(f"blocks[{matrix_id}]\t{part.n_row_tiles * part.n_col_tiles}")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _finish(result, pool, runner, wall_start, profile_out) -> int:
    with runner.clock.timing(STAGE_POST):
        pool.close()
    result.stage_seconds = dict(runner.clock.seconds)
    wall = time.perf_counter() - wall_start
    if profile_out:
        _write_profile(profile_out, wall, result, pool, runner)
    return 0


def cmd_factorize(args) -> int:
    if getattr(args, "rank", None) is not None and args.rank < 1:
        return _usage_error(f"--rank must be at least 1, got {args.rank}")
    if args.threads < 1:
        return _usage_error(f"--threads must be at least 1, got {args.threads}")

    if args.command == "compress-image":
        output = args.output
        default_work = output + ".xsvd-work"
    else:
        output = args.outdir
        default_work = os.path.join(output, "xsvd-work")
    workdir = args.workdir or default_work

    budget = MemoryBudget(args.memory_per_matrix, args.memory_new, args.memory_global)
    if args.command == "svd":
        rank, power = 1, 0  # placeholders; the exact path ignores both
    else:
        rank = args.rank
        power = "auto" if args.power == "auto" else int(args.power)
    config = RsvdConfig(
        rank=rank,
        power=power,
        seed=args.seed,
        precision=Precision(args.precision),
        budget=budget,
        workdir=workdir,
    )

    wall_start = time.perf_counter()
    result, pool, runner = run_command(
        args.command,
        args.input,
        output,
        config,
        threads=args.threads,
        profile_out=args.profile_out,
    )
    return _finish(result, pool, runner, wall_start, args.profile_out)


def cmd_resume(args) -> int:
    wall_start = time.perf_counter()
    result, pool, runner = resume_plan(args.workdir)
    saved = pool.store.load_plan_config() or {}
    return _finish(result, pool, runner, wall_start, saved.get("profile_out"))


def cmd_info(args) -> int:
    info = read_matrix_market_info(args.input)
    rows, cols, entries = info["rows"], info["cols"], info["entries"]
    dense_bytes = rows * cols * Precision.DOUBLE.nbytes
    budget = MemoryBudget(args.memory_per_matrix, args.memory_new, args.memory_global)
    part = partition_for_budget(
        rows,
        cols,
        precision=Precision.DOUBLE,
        density=Density.SPARSE,
        nnz=entries,
        index_width=IndexWidth.for_shape(rows, cols),
        limit=budget.limit_for(),
    )
    th, tw = part.max_tile_shape()
    print(f"rows\t{rows}")
    print(f"cols\t{cols}")
    print(f"nnz\t{entries}")
    print(f"symmetric\t{'yes' if info['symmetric'] else 'no'}")
    print(f"field\t{info['field']}")
    print(f"density\t{entries / (rows * cols):.6g}")
    print(f"dense-equivalent-bytes\t{dense_bytes}")
    print(f"dense-equivalent\t{_human_bytes(dense_bytes)}")
    print(f"partition\t{part.n_row_tiles}x{part.n_col_tiles} tiles up to {th}x{tw}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        if args.command == "info":
            return cmd_info(args)
        if args.command == "resume":
            return cmd_resume(args)
        return cmd_factorize(args)
    except ParseError as e:
        name = getattr(args, "input", "input")
        print(f"error: {name}: {e}", file=sys.stderr)
        return 3
    except (FormatError, ShapeError, ConvergenceError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except BudgetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except PlanNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 6
    except ConfigMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 7
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
