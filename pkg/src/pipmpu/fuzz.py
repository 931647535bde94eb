"""Seeded random kernel-call sequences with invariant checks and shrinking.

Each case boots a fresh state on a small randomized layout and issues random
scenario commands. Most arguments are drawn from live aliases so calls tend to
succeed; the rest are arbitrary so error paths get exercised too. After every
call the fuzzer checks:

* all invariant checkers, after a successful state-changing call;
* that a refused call left the state byte-identical;
* that no call visited more than ``C * max_structures`` entries of any one
  partition, and that block removal never searched the child.

The first finding of a case is shrunk by greedy command deletion into a
replayable scenario script.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .errors import PipError
from .invariants import check_all
from .memory import MIN_BLOCK
from .metadata import BlockEntry, SlotRef
from .mpu import Rights
from .scenario import MUTATING, SYSCALLS, Command, Runner, format_scenario

ATOMICITY = "Atomicity"
COMPLEXITY = "Complexity"

# (flash start, flash size, ram start, ram size, kernel flash, kernel ram)
FUZZ_LAYOUTS = (
    (0x00000000, 64 << 10, 0x20000000, 16 << 10, 9544, 1664),
    (0x00000000, 32 << 10, 0x20000000, 16 << 10, 9544, 1664),
    (0x00000000, 64 << 10, 0x20000000, 8 << 10, 9544, 1664),
    (0x08000000, 64 << 10, 0x20000000, 16 << 10, 9544, 1664),
)
# whole address space of these fits in 4 KiB, for byte-exhaustive oracles
TINY_LAYOUTS = (
    (0x00000000, 1 << 10, 0x20000000, 3 << 10, 96, 64),
    (0x00000000, 2 << 10, 0x00001000, 2 << 10, 64, 32),
)

WEIGHTS = {
    "cut": 22, "add": 14, "map": 14, "create": 7, "prepare": 9, "merge": 9,
    "remove": 6, "collect": 4, "delete": 3, "switch": 6, "access": 4, "find": 2,
}


def layout_command(dims: tuple, profile: str) -> Command:
    fs, fz, rs, rz, kf, kr = dims
    return Command("layout", ("flash", hex(fs), hex(fz), "ram", hex(rs), hex(rz),
                              "kflash", str(kf), "kram", str(kr), "profile", profile))


class OpGenerator:
    """Draws the next command from the live state of a runner."""

    def __init__(self, rng: random.Random, runner: Runner, valid_bias: float = 0.8):
        self.rng = rng
        self.runner = runner
        self.valid_bias = valid_bias
        self.counter = 0
        self.ops = list(WEIGHTS)
        self.weights = list(WEIGHTS.values())

    # views of the live state -------------------------------------------------

    def _fresh(self, prefix: str) -> str:
        self.counter += 1
        return f"{prefix}{self.counter}"

    def _partitions(self) -> list[str]:
        st = self.runner.state
        return [a for a, v in self.runner.aliases.items()
                if isinstance(v, int) and v in st.partitions]

    def _children(self, pid: int) -> list[str]:
        kids = self.runner.state.partitions[pid].children
        return [a for a, v in self.runner.aliases.items() if isinstance(v, int) and v in kids]

    def _blocks(self, pid: int, pred: Callable[[BlockEntry], bool] = lambda e: True
                ) -> list[tuple[str, BlockEntry]]:
        pd = self.runner.state.partitions[pid]
        out, seen = [], set()
        for alias, slot in self.runner.aliases.items():
            if not isinstance(slot, SlotRef) or self.runner.owner.get(alias) != pid or slot in seen:
                continue
            e = pd.entry(slot)
            if e is not None and pred(e):
                seen.add(slot)
                out.append((alias, e))
        return out

    def _any_block(self) -> str:
        names = [a for a, v in self.runner.aliases.items() if isinstance(v, SlotRef)]
        if names and self.rng.random() < 0.7:
            return self.rng.choice(names)
        k = self.runner.state.constants
        return f"s{self.rng.randrange(k.max_structures)}.{self.rng.randrange(k.C)}"

    def _any_partition(self) -> str:
        return self.rng.choice([a for a, v in self.runner.aliases.items() if isinstance(v, int)])

    def _any_addr(self, aligned: bool = True) -> int:
        lay = self.runner.state.layout
        seg = self.rng.choice((lay.flash, lay.ram))
        addr = self.rng.randrange(seg.start, seg.end + MIN_BLOCK)
        return addr - addr % MIN_BLOCK if aligned and self.rng.random() < 0.8 else addr

    def _rights(self) -> str:
        return str(Rights.from_bits(self.rng.randrange(8)))

    def _subset(self, rights: Rights) -> str:
        return str(Rights.from_bits(rights.bits & self.rng.randrange(8)))

    def _cut_point(self, e: BlockEntry) -> int:
        units = e.range.size // MIN_BLOCK
        if self.rng.random() < 0.5:
            return e.range.start + (units // 2) * MIN_BLOCK
        return e.range.start + self.rng.randrange(1, units) * MIN_BLOCK

    # command construction ---------------------------------------------------

    def next(self) -> Command:
        op = self.rng.choices(self.ops, self.weights)[0]
        if self.rng.random() < self.valid_bias:
            cmd = self._valid(op)
            if cmd is not None:
                return cmd
        return self._random(op)

    def _random(self, op: str) -> Command:
        r = self.rng
        caller = self._any_partition()
        if op == "cut":
            return Command("cut", (self._any_block(), hex(self._any_addr())), caller, self._fresh("b"))
        if op == "add":
            return Command("add", (self._any_partition(), self._any_block(), self._rights()),
                           caller, self._fresh("b"))
        if op == "map":
            block = "none" if r.random() < 0.2 else self._any_block()
            region = r.randrange(self.runner.state.profile.region_count + 1)
            return Command("map", (block, "region", str(region)), caller)
        if op == "create":
            return Command("create", (self._any_block(),), caller, self._fresh("c"))
        if op == "prepare":
            target = "self" if r.random() < 0.4 else self._any_partition()
            return Command("prepare", (target, self._any_block()), caller)
        if op == "merge":
            return Command("merge", (self._any_block(), self._any_block()), caller, self._fresh("b"))
        if op == "remove":
            return Command("remove", (self._any_block(),), caller)
        if op == "collect":
            target = "self" if r.random() < 0.4 else self._any_partition()
            return Command("collect", (target,), caller, self._fresh("b"))
        if op == "delete":
            return Command("delete", (self._any_partition(),), caller)
        if op == "switch":
            return Command("switch", (self._any_partition(),))
        if op == "access":
            return Command("access", (hex(self._any_addr(aligned=False)),
                                      r.choice(("read", "write", "exec"))))
        return Command("find", (self._any_block(),), caller)

    def _valid(self, op: str) -> Optional[Command]:
        r = self.rng
        st = self.runner.state
        k = st.constants
        callers = self._partitions()
        r.shuffle(callers)
        for caller in callers[:3]:
            pid = self.runner.aliases[caller]
            usable = self._blocks(pid, lambda e: e.usable)
            kids = self._children(pid)
            if op == "cut":
                big = [(a, e) for a, e in usable if e.range.size >= 2 * MIN_BLOCK]
                if big:
                    a, e = r.choice(big)
                    return Command("cut", (a, hex(self._cut_point(e))), caller, self._fresh("b"))
            elif op == "add" and kids and usable:
                open_kids = [c for c in kids
                             if st.partitions[self.runner.aliases[c]].free_slot_count]
                if not open_kids:
                    # a child cannot receive blocks before it has a structure
                    fit = [a for a, e in usable if e.range.size >= k.S]
                    if fit:
                        return Command("prepare", (r.choice(kids), r.choice(fit)), caller)
                    continue
                a, e = r.choice(usable)
                rights = self._rights() if r.random() < 0.15 else self._subset(e.rights)
                return Command("add", (r.choice(open_kids), a, rights), caller, self._fresh("b"))
            elif op == "map":
                region = r.randrange(st.profile.reserved_regions, st.profile.region_count)
                if usable and r.random() < 0.9:
                    a, _ = r.choice(usable)
                    return Command("map", (a, "region", str(region)), caller)
                return Command("map", ("none", "region", str(region)), caller)
            elif op == "create":
                fit = [a for a, e in usable if e.range.size >= k.K]
                if fit:
                    return Command("create", (r.choice(fit),), caller, self._fresh("c"))
            elif op == "prepare":
                fit = [a for a, e in usable if e.range.size >= k.S]
                if fit:
                    target = r.choice(kids + ["self"])
                    return Command("prepare", (target, r.choice(fit)), caller)
            elif op == "merge":
                pairs = []
                pd = st.partitions[pid]
                for a, e in usable:
                    if e.cut_from is not None:
                        left = [la for la, le in usable if self.runner.aliases[la] == e.cut_from]
                        if left:
                            pairs.append((left[0], a))
                if pairs:
                    la, ra = r.choice(pairs)
                    return Command("merge", (la, ra), caller, self._fresh("b"))
            elif op == "remove":
                lent = self._blocks(pid, lambda e: e.shared_with is not None)
                if lent:
                    return Command("remove", (r.choice(lent)[0],), caller)
            elif op == "collect":
                return Command("collect", (r.choice(kids + ["self"]),), caller, self._fresh("b"))
            elif op == "delete" and kids:
                return Command("delete", (r.choice(kids),), caller)
            elif op == "switch":
                return Command("switch", (r.choice(callers),))
            elif op == "access":
                regions = st.mpu.enabled()
                if regions:
                    reg = r.choice(regions).range
                    addr = r.randrange(reg.start, reg.end)
                else:
                    addr = self._any_addr(aligned=False)
                return Command("access", (hex(addr), r.choice(("read", "write", "exec"))))
            elif op == "find":
                blocks = self._blocks(pid)
                if blocks:
                    return Command("find", (r.choice(blocks)[0],), caller)
        return None


@dataclass
class Finding:
    case: int
    step: int
    kind: str
    detail: str
    reproducer: str = ""

    def to_dict(self) -> dict:
        return {"case": self.case, "step": self.step, "kind": self.kind,
                "detail": self.detail, "reproducer": self.reproducer}


@dataclass
class CaseResult:
    index: int
    ops: int = 0
    succeeded: int = 0
    refused: int = 0
    max_visits: int = 0
    max_remove_probes: int = 0
    finding: Optional[Finding] = None


def _step(runner: Runner, cmd: Command, limit: int) -> tuple[Optional[tuple[str, str]], object]:
    """Execute one command; return ``(kind, detail)`` of the first problem seen."""
    st = runner.state
    before = st.snapshot() if cmd.op in SYSCALLS | {"switch"} else None
    outcome = runner.execute(cmd)
    if outcome.status == "error" and before is not None and st.snapshot() != before:
        return (ATOMICITY, f"refused {cmd} ({outcome.error}) changed the state"), outcome
    if before is not None and outcome.status in ("ok", "error"):
        worst = max(st.visits.values(), default=0)
        if worst > limit:
            return (COMPLEXITY, f"{cmd} visited {worst} entries of one partition"), outcome
        if cmd.op == "remove" and sum(st.searches.values()):
            return (COMPLEXITY, f"{cmd} searched the child"), outcome
    if outcome.status == "ok" and cmd.op in SYSCALLS | {"switch"}:
        if cmd.op in MUTATING:
            found = check_all(st)
            if found:
                return (found[0].kind.value, str(found[0])), outcome
    return None, outcome


def replay(layout: Command, commands: list[Command]) -> Optional[str]:
    """Kind of the first finding raised by ``commands``, or None."""
    runner = Runner(lenient=True, check=False)
    runner.execute(layout)
    limit = runner.state.constants.C * runner.state.constants.max_structures
    for cmd in commands:
        problem, _ = _step(runner, cmd, limit)
        if problem is not None:
            return problem[0]
    return None


def shrink(layout: Command, commands: list[Command], kind: str) -> list[Command]:
    """Greedily delete commands while the same kind of finding persists."""
    changed = True
    while changed:
        changed = False
        for i in reversed(range(len(commands))):
            trial = commands[:i] + commands[i + 1:]
            if replay(layout, trial) == kind:
                commands = trial
                changed = True
    return commands


def reproducer(layout: Command, commands: list[Command]) -> str:
    """Scenario text replaying ``commands``, annotated with observed errors."""
    runner = Runner(lenient=True, check=False)
    runner.execute(layout)
    lines = [layout]
    for cmd in commands:
        outcome = runner.execute(cmd)
        if outcome.status == "error":
            cmd = Command(cmd.op, cmd.args, cmd.caller, cmd.bind, outcome.error)
        elif cmd.op == "access":
            cmd = Command(cmd.op, cmd.args, cmd.caller, outcome.value)
        lines.append(cmd)
    return format_scenario(lines)


def run_case(seed: int, index: int, max_ops: int, profile: str = "armv8",
             layouts: tuple = FUZZ_LAYOUTS, do_shrink: bool = True) -> CaseResult:
    rng = random.Random(seed * 1_000_003 + index)
    layout = layout_command(rng.choice(layouts), profile)
    runner = Runner(lenient=True, check=False)
    runner.execute(layout)
    gen = OpGenerator(rng, runner)
    k = runner.state.constants
    limit = k.C * k.max_structures
    result = CaseResult(index)
    history: list[Command] = []
    for step in range(max_ops):
        cmd = gen.next()
        history.append(cmd)
        problem, outcome = _step(runner, cmd, limit)
        result.ops += 1
        if outcome.status == "ok":
            result.succeeded += 1
        elif outcome.status == "error":
            result.refused += 1
        if cmd.op in SYSCALLS | {"switch"}:
            result.max_visits = max(result.max_visits, max(runner.state.visits.values(), default=0))
            if cmd.op == "remove":
                result.max_remove_probes = max(result.max_remove_probes,
                                               sum(runner.state.searches.values()))
        if problem is not None:
            kind, detail = problem
            cmds = shrink(layout, history, kind) if do_shrink else history
            result.finding = Finding(index, step, kind, detail, reproducer(layout, cmds))
            break
    return result


@dataclass
class FuzzReport:
    seed: int
    cases: int
    max_ops: int
    profile: str
    results: list[CaseResult] = field(default_factory=list)

    @property
    def findings(self) -> list[Finding]:
        return [r.finding for r in self.results if r.finding is not None]

    @property
    def exit_code(self) -> int:
        return 1 if self.findings else 0

    def totals(self) -> dict:
        return {
            "cases": len(self.results),
            "ops": sum(r.ops for r in self.results),
            "succeeded": sum(r.succeeded for r in self.results),
            "refused": sum(r.refused for r in self.results),
            "max_entry_visits": max((r.max_visits for r in self.results), default=0),
            "max_remove_child_probes": max((r.max_remove_probes for r in self.results), default=0),
            "findings": len(self.findings),
        }

    def render(self) -> str:
        head = f"fuzz seed={self.seed} cases={self.cases} ops={self.max_ops} profile={self.profile}"
        lines = [head]
        lines += [f"{k}\t{v}" for k, v in self.totals().items()]
        for f in self.findings:
            lines.append(f"finding\tcase={f.case}\tstep={f.step}\t{f.kind}\t{f.detail}")
            lines.append("--- reproducer ---")
            lines.append(f.reproducer.rstrip())
            lines.append("---")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "cases": self.cases, "max_ops": self.max_ops,
                "profile": self.profile, "totals": self.totals(),
                "findings": [f.to_dict() for f in self.findings]}


def fuzz(seed: int, cases: int, max_ops: int, profile: str = "armv8",
         layouts: tuple = FUZZ_LAYOUTS, do_shrink: bool = True) -> FuzzReport:
    report = FuzzReport(seed, cases, max_ops, profile)
    for index in range(cases):
        report.results.append(run_case(seed, index, max_ops, profile, layouts, do_shrink))
    return report


def random_states(seed: int, count: int, max_ops: int = 40, profile: str = "armv8",
                  layouts: tuple = TINY_LAYOUTS) -> Iterator[Runner]:
    """Runners left in reachable states by random call sequences, each with a
    randomly chosen active partition."""
    for index in range(count):
        rng = random.Random(seed * 1_000_003 + index)
        runner = Runner(lenient=True, check=False)
        runner.execute(layout_command(rng.choice(layouts), profile))
        gen = OpGenerator(rng, runner)
        for _ in range(rng.randrange(max_ops + 1)):
            runner.execute(gen.next())
        st = runner.state
        pids = sorted(st.partitions)
        holders = [p for p in pids if any(e.usable for _, e in st.partitions[p].present())]
        pid = rng.choice(holders if holders and rng.random() < 0.9 else pids)
        st.switch_partition(pid)
        # give the active partition a populated MPU most of the time
        slots = [slot for slot, e in st.partitions[pid].present() if e.usable]
        rng.shuffle(slots)
        for slot in slots[:rng.randrange(st.profile.region_count + 1)]:
            try:
                st.map_mpu(slot, rng.randrange(st.profile.region_count), caller=pid)
            except PipError:
                pass
        yield runner
