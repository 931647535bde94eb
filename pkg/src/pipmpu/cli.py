"""Command-line front end.

Exit codes: 0 when every expectation holds and no invariant is violated,
1 on an expectation failure or violation, 2 on parse or usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import PipError
from .invariants import accessible_bytes, accessible_ratio
from .metadata import DEFAULT_CONSTANTS, compute_footprint
from .scenario import ParseError, parse_scenario, run_scenario

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc


def _load(path: str):
    try:
        return parse_scenario(_read(path))
    except ParseError as exc:
        raise UsageError(f"{path}:{exc.line}: {exc.message}") from exc


def cmd_run(args) -> int:
    result = run_scenario(_load(args.file), args.profile, args.keep_going)
    print(result.to_json() if args.json else result.render())
    return EXIT_OK if result.ok else EXIT_FAIL


def cmd_fuzz(args) -> int:
    from .fuzz import fuzz

    if args.cases < 0 or args.ops < 1:
        raise UsageError("--cases must be >= 0 and --ops >= 1")
    report = fuzz(args.seed, args.cases, args.ops, args.profile or "armv8")
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.render())
    if args.reproducers:
        out = Path(args.reproducers)
        out.mkdir(parents=True, exist_ok=True)
        for f in report.findings:
            (out / f"case{f.case:05d}.pip").write_text(f.reproducer)
    return report.exit_code


def parse_tree(text: str) -> list[tuple[str, int, Optional[str]]]:
    """Lines of ``name blocks [parent]``; parents must be declared first."""
    rows, seen = [], set()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ParseError(n, "expected 'name blocks [parent]'")
        name, count = parts[0], parts[1]
        parent = parts[2] if len(parts) == 3 else None
        try:
            blocks = int(count, 0)
        except ValueError:
            raise ParseError(n, f"bad block count {count!r}") from None
        if name in seen:
            raise ParseError(n, f"duplicate partition {name!r}")
        if parent is not None and parent not in seen:
            raise ParseError(n, f"unknown parent {parent!r}")
        seen.add(name)
        rows.append((name, blocks, parent))
    return rows


def footprint_table(rows: Sequence[tuple[str, int, Optional[str]]], k=DEFAULT_CONSTANTS
                    ) -> tuple[list[tuple[str, int, Optional[str], int]], int]:
    table = [(name, b, parent, compute_footprint(b, k)) for name, b, parent in rows]
    return table, sum(t[3] for t in table)


def cmd_footprint(args) -> int:
    if args.tree:
        try:
            rows = parse_tree(_read(args.tree))
        except ParseError as exc:
            raise UsageError(f"{args.tree}:{exc.line}: {exc.message}") from exc
    else:
        rows = [("partition", args.blocks, None)]
    try:
        table, total = footprint_table(rows)
    except PipError as exc:
        raise UsageError(f"{exc.code.slug}: {exc.detail}") from exc
    if args.json:
        print(json.dumps({"partitions": [dict(zip(("name", "blocks", "parent", "bytes"), t))
                                         for t in table], "total": total}, indent=2))
    else:
        print("partition\tblocks\tparent\tfootprint_bytes")
        for name, b, parent, fp in table:
            print(f"{name}\t{b}\t{parent or '-'}\t{fp}")
        print(f"total\t{sum(t[1] for t in table)}\t-\t{total}")
    if args.plot:
        from .plotting import plot_footprint

        print(f"plot\t{plot_footprint(args.plot, [(t[0], t[1]) for t in table])}")
    return EXIT_OK


def cmd_ratio(args) -> int:
    result = run_scenario(_load(args.scenario), args.profile)
    if result.state is None:
        print(result.render())
        return EXIT_FAIL
    pid = result.aliases.get(args.partition)
    if not isinstance(pid, int) or pid not in result.state.partitions:
        raise UsageError(f"{args.partition!r} is not a live partition at the end of the scenario")
    st = result.state
    report = {}
    for seg, rng in st.layout.segments().items():
        report[seg] = {"accessible_bytes": accessible_bytes(st, pid, seg), "size": rng.size,
                       "percent": accessible_ratio(st, pid, seg)}
    if args.json:
        print(json.dumps({"partition": args.partition, "segments": report,
                          "scenario_passed": result.ok}, indent=2))
    else:
        print("partition\tsegment\taccessible_bytes\tsize\tpercent")
        for seg, r in report.items():
            print(f"{args.partition}\t{seg}\t{r['accessible_bytes']}\t{r['size']}\t{r['percent']:.6f}")
        if not result.ok:
            print(f"scenario\tfailed\t{result.summary()}")
    if args.plot:
        from .plotting import plot_ratios

        names = {v: a for a, v in result.aliases.items() if isinstance(v, int)}
        rows = [(names.get(p, f"p{p}"), accessible_ratio(st, p, "flash"), accessible_ratio(st, p, "ram"))
                for p in sorted(st.partitions)]
        print(f"plot\t{plot_ratios(args.plot, rows)}")
    return EXIT_OK if result.ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipmpu", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    profile = dict(choices=("armv7", "armv8"), default=None,
                   help="MPU profile; overrides the scenario's layout line")

    r = sub.add_parser("run", help="execute a scenario script")
    r.add_argument("file")
    r.add_argument("--profile", **profile)
    r.add_argument("--json", action="store_true")
    r.add_argument("--keep-going", action="store_true", help="do not stop at the first failure")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("fuzz", help="seeded random call sequences with invariant checks")
    f.add_argument("--seed", type=int, default=1)
    f.add_argument("--cases", type=int, default=100)
    f.add_argument("--ops", type=int, default=50)
    f.add_argument("--profile", **profile)
    f.add_argument("--json", action="store_true")
    f.add_argument("--reproducers", metavar="DIR", help="write shrunk reproducers here")
    f.set_defaults(func=cmd_fuzz)

    fp = sub.add_parser("footprint", help="metadata RAM footprint per partition")
    src = fp.add_mutually_exclusive_group(required=True)
    src.add_argument("--blocks", type=int)
    src.add_argument("--tree", help="file of 'name blocks [parent]' lines")
    fp.add_argument("--json", action="store_true")
    fp.add_argument("--plot", metavar="PNG")
    fp.set_defaults(func=cmd_footprint)

    ra = sub.add_parser("ratio", help="accessible flash/RAM share of a partition")
    ra.add_argument("scenario")
    ra.add_argument("--partition", required=True)
    ra.add_argument("--profile", **profile)
    ra.add_argument("--json", action="store_true")
    ra.add_argument("--plot", metavar="PNG")
    ra.set_defaults(func=cmd_ratio)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
