"""Line-oriented scenario scripts driving the kernel model.

One command per line, ``#`` starts a comment::

    layout flash 0x00000000 0x100000 ram 0x20000000 0x40000 kflash 9544 kram 1664
    as root cut b0 0x20001000 -> b1
    as root create b1 -> c1
    as c1 map cb3 region 3
    switch c1
    access 0x20001040 read -> ok
    expect-error no-free-slot: as c1 cut cb3 0x20001020
    check

Aliases bind partition ids and block slots; ``root`` is predefined and the
layout binds ``b0`` (root RAM block) and ``f0`` (root flash block). A slot may
also be written literally as ``s<structure>.<entry>``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import ErrorCode, PipError
from .invariants import Violation, check_all
from .memory import MemoryLayout
from .metadata import DEFAULT_CONSTANTS, KernelConstants, SlotRef, compute_footprint
from .mpu import AccessType, MpuProfile, Rights
from .services import SELF, SystemState

SYSCALLS = {"create", "delete", "prepare", "collect", "add", "remove", "cut", "merge", "map", "find"}
BINDING = {"create", "collect", "add", "cut", "merge"}
# operand arity (min, max) after the keyword
ARITY = {
    "create": (1, 1), "delete": (1, 1), "prepare": (2, 2), "collect": (0, 1),
    "add": (3, 3), "remove": (1, 1), "cut": (2, 2), "merge": (2, 2), "map": (3, 3),
    "find": (1, 1), "switch": (1, 1), "access": (2, 2), "check": (0, 0), "dump": (1, 1),
    "footprint": (1, 1),
}
MUTATING = SYSCALLS - {"find"} | {"switch"}


class ParseError(Exception):
    def __init__(self, line: int, message: str):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class Command:
    op: str
    args: tuple[str, ...] = ()
    caller: Optional[str] = None
    bind: Optional[str] = None          # alias, or expected verdict for access
    expect_error: Optional[str] = None
    line: int = field(default=0, compare=False)

    def __str__(self) -> str:
        body = " ".join((self.op, *self.args))
        if self.caller is not None:
            body = f"as {self.caller} {body}"
        if self.bind is not None:
            body += f" -> {self.bind}"
        if self.expect_error is not None:
            body = f"expect-error {self.expect_error}: {body}"
        return body


def _int(text: str, line: int) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ParseError(line, f"expected a number, got {text!r}") from None


def _parse_layout(tokens: list[str], line: int) -> Command:
    keys = {"flash": 2, "ram": 2, "kflash": 1, "kram": 1, "profile": 1}
    seen = {}
    i = 0
    while i < len(tokens):
        key = tokens[i]
        if key not in keys or key in seen:
            raise ParseError(line, f"unexpected layout field {key!r}")
        vals = tokens[i + 1:i + 1 + keys[key]]
        if len(vals) != keys[key]:
            raise ParseError(line, f"layout field {key!r} needs {keys[key]} value(s)")
        if key == "profile":
            if vals[0] not in ("armv7", "armv8"):
                raise ParseError(line, f"unknown profile {vals[0]!r}")
        else:
            for v in vals:
                _int(v, line)
        seen[key] = vals
        i += 1 + keys[key]
    if "flash" not in seen or "ram" not in seen:
        raise ParseError(line, "layout needs flash and ram")
    args = []
    for key in keys:
        if key in seen:
            args += [key, *seen[key]]
    return Command("layout", tuple(args), line=line)


def _parse_inner(tokens: list[str], line: int, allow_top: bool) -> Command:
    caller = None
    if tokens and tokens[0] == "as":
        if len(tokens) < 3:
            raise ParseError(line, "'as' needs a partition and a command")
        caller, tokens = tokens[1], tokens[2:]
    if not tokens:
        raise ParseError(line, "missing command")
    op, rest = tokens[0], tokens[1:]
    bind = None
    if "->" in rest:
        at = rest.index("->")
        if at != len(rest) - 2:
            raise ParseError(line, "'->' must be followed by exactly one name")
        bind, rest = rest[-1], rest[:at]
    if op not in ARITY or op == "layout":
        raise ParseError(line, f"unknown command {op!r}")
    if caller is not None and op not in SYSCALLS:
        raise ParseError(line, f"'{op}' cannot run as a partition")
    if not allow_top and op not in SYSCALLS | {"switch"}:
        raise ParseError(line, f"'{op}' cannot be expected to fail")
    lo, hi = ARITY[op]
    if not lo <= len(rest) <= hi:
        raise ParseError(line, f"'{op}' takes {lo if lo == hi else f'{lo}-{hi}'} operand(s)")
    if bind is not None and op not in BINDING and op != "access":
        raise ParseError(line, f"'{op}' does not return a value to bind")
    if op == "cut":
        _int(rest[1], line)
    elif op == "add":
        try:
            Rights.parse(rest[2])
        except ValueError as exc:
            raise ParseError(line, str(exc)) from None
    elif op == "map":
        if rest[1] != "region":
            raise ParseError(line, "expected 'map <block|none> region <n>'")
        _int(rest[2], line)
    elif op == "access":
        _int(rest[0], line)
        try:
            AccessType.parse(rest[1])
        except KeyError:
            raise ParseError(line, f"unknown access type {rest[1]!r}") from None
        if bind not in (None, "ok", "fault"):
            raise ParseError(line, "access expectation must be 'ok' or 'fault'")
    elif op == "footprint":
        _int(rest[0], line)
    return Command(op, tuple(rest), caller, bind, line=line)


def parse_line(text: str, line: int = 0) -> Optional[Command]:
    text = text.split("#", 1)[0].strip()
    if not text:
        return None
    if text.startswith("expect-error"):
        head, sep, tail = text.partition(":")
        parts = head.split()
        if not sep or len(parts) != 2:
            raise ParseError(line, "expected 'expect-error <error-name>: <command>'")
        code = parts[1]
        try:
            ErrorCode.from_slug(code)
        except KeyError:
            raise ParseError(line, f"unknown error name {code!r}") from None
        inner = _parse_inner(tail.split(), line, allow_top=False)
        return Command(inner.op, inner.args, inner.caller, inner.bind, code, line)
    tokens = text.split()
    if tokens[0] == "layout":
        return _parse_layout(tokens[1:], line)
    return _parse_inner(tokens, line, allow_top=True)


def parse_scenario(text: str) -> list[Command]:
    out = []
    for number, raw in enumerate(text.splitlines(), 1):
        cmd = parse_line(raw, number)
        if cmd is not None:
            out.append(cmd)
    return out


def format_scenario(commands: list[Command]) -> str:
    return "\n".join(str(c) for c in commands) + "\n"


def layout_from(cmd: Command) -> tuple[MemoryLayout, Optional[str]]:
    a = dict()
    i = 0
    while i < len(cmd.args):
        key = cmd.args[i]
        n = 2 if key in ("flash", "ram") else 1
        a[key] = cmd.args[i + 1:i + 1 + n]
        i += 1 + n
    layout = MemoryLayout.create(
        int(a["flash"][0], 0), int(a["flash"][1], 0), int(a["ram"][0], 0), int(a["ram"][1], 0),
        int(a.get("kflash", ("0",))[0], 0), int(a.get("kram", ("0",))[0], 0))
    return layout, a.get("profile", (None,))[0]


# -- execution -------------------------------------------------------------


@dataclass
class Outcome:
    command: Command
    status: str                       # ok | error | fail | skipped
    value: Optional[str] = None
    error: Optional[str] = None
    message: str = ""
    violations: list[Violation] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.status == "fail"

    def __str__(self) -> str:
        where = f"{self.command.line}: " if self.command.line else ""
        text = f"{where}{self.status.upper():5} {self.command}"
        if self.value is not None:
            text += f"  => {self.value}"
        if self.message:
            text += f"  ({self.message})"
        for v in self.violations:
            text += f"\n      ! {v}"
        return text

    def to_dict(self) -> dict:
        return {
            "line": self.command.line,
            "command": str(self.command),
            "status": self.status,
            "value": self.value,
            "error": self.error,
            "message": self.message,
            "violations": [v.to_dict() for v in self.violations],
        }


@dataclass
class ScenarioResult:
    outcomes: list[Outcome]
    violations: list[Violation]
    state: Optional[SystemState] = None
    aliases: dict = field(default_factory=dict)
    stopped: bool = False

    @property
    def failures(self) -> int:
        return sum(o.failed for o in self.outcomes)

    @property
    def ok(self) -> bool:
        return self.failures == 0 and not self.violations

    def summary(self) -> dict:
        counts = {}
        for o in self.outcomes:
            counts[o.status] = counts.get(o.status, 0) + 1
        return {"commands": len(self.outcomes), **counts,
                "violations": len(self.violations), "passed": self.ok}

    def render(self) -> str:
        lines = [str(o) for o in self.outcomes]
        lines += [f"violation: {v}" for v in self.violations]
        s = self.summary()
        lines.append("summary: " + " ".join(f"{k}={v}" for k, v in s.items()))
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"outcomes": [o.to_dict() for o in self.outcomes],
                           "violations": [v.to_dict() for v in self.violations],
                           "summary": self.summary()}, indent=2)


class UnknownAlias(Exception):
    pass


class Runner:
    """Executes commands one at a time against a fresh system state.

    ``lenient`` mode (used while fuzzing and shrinking) records refused calls and
    unresolvable aliases as plain outcomes instead of failures.
    """

    def __init__(self, profile: Optional[str] = None, constants: KernelConstants = DEFAULT_CONSTANTS,
                 lenient: bool = False, check: bool = True):
        self.profile_override = profile
        self.constants = constants
        self.lenient = lenient
        self.check = check
        self.state: Optional[SystemState] = None
        self.aliases: dict[str, Union[int, SlotRef]] = {}
        self.owner: dict[str, int] = {}
        self.last_violations: list[Violation] = []

    # aliases ---------------------------------------------------------------

    def partition(self, name: str) -> int:
        value = self.aliases.get(name)
        if not isinstance(value, int):
            raise UnknownAlias(f"unknown partition {name!r}")
        return value

    def slot(self, name: str) -> SlotRef:
        if name.startswith("s") and "." in name:
            try:
                return SlotRef.parse(name)
            except ValueError:
                pass
        value = self.aliases.get(name)
        if not isinstance(value, SlotRef):
            raise UnknownAlias(f"unknown block {name!r}")
        return value

    def target(self, name: str):
        return SELF if name == "self" else self.partition(name)

    def _bind(self, cmd: Command, value, owner: int) -> None:
        if cmd.bind is not None and cmd.op != "access":
            self.aliases[cmd.bind] = value
            if isinstance(value, SlotRef):
                self.owner[cmd.bind] = owner

    def alias_of(self, value) -> str:
        for name, v in self.aliases.items():
            if v == value and isinstance(v, type(value)):
                return name
        return str(value)

    # execution ---------------------------------------------------------------

    def _layout(self, cmd: Command) -> str:
        if self.state is not None:
            raise ValueError("layout given twice")
        layout, profile = layout_from(cmd)
        name = self.profile_override or profile or "armv8"
        self.state = SystemState(layout, MpuProfile.named(name), self.constants)
        self.aliases = {"root": self.state.root}
        self.owner = {}
        for segment, alias in (("ram", "b0"), ("flash", "f0")):
            if segment in self.state.initial_blocks:
                self.aliases[alias] = self.state.initial_blocks[segment]
                self.owner[alias] = self.state.root
        return f"profile {name}"

    def _syscall(self, cmd: Command):
        st = self.state
        a = cmd.args
        caller = self.partition(cmd.caller) if cmd.caller is not None else st.active
        if cmd.op == "create":
            pid = st.create_partition(self.slot(a[0]), caller)
            self._bind(cmd, pid, caller)
            return f"p{pid}"
        if cmd.op == "delete":
            st.delete_partition(self.partition(a[0]), caller)
            return None
        if cmd.op == "prepare":
            st.prepare(self.target(a[0]), self.slot(a[1]), caller)
            return None
        if cmd.op == "collect":
            tgt = self.target(a[0]) if a else SELF
            found = st.collectable(caller if tgt == SELF else tgt)
            slot = st.collect(tgt, caller)
            self._bind(cmd, slot, found[1][0])
            return str(slot)
        if cmd.op == "add":
            child = self.partition(a[0])
            slot = st.add_memory_block(child, self.slot(a[1]), Rights.parse(a[2]), caller)
            self._bind(cmd, slot, child)
            return str(slot)
        if cmd.op == "remove":
            st.remove_memory_block(self.slot(a[0]), caller)
            return None
        if cmd.op == "cut":
            slot = st.cut_memory_block(self.slot(a[0]), int(a[1], 0), caller)
            self._bind(cmd, slot, caller)
            return str(slot)
        if cmd.op == "merge":
            slot = st.merge_memory_blocks(self.slot(a[0]), self.slot(a[1]), caller)
            self._bind(cmd, slot, caller)
            return str(slot)
        if cmd.op == "map":
            block = None if a[0] == "none" else self.slot(a[0])
            st.map_mpu(block, int(a[2], 0), caller)
            return None
        if cmd.op == "find":
            v = st.find_block(self.slot(a[0]), caller)
            shared = f"p{v.shared_with}" if v.shared_with is not None else "-"
            return (f"{v.range} {v.rights} accessible={v.accessible} shared={shared} "
                    f"cut={v.is_cut_product}")
        if cmd.op == "switch":
            st.switch_partition(self.partition(a[0]))
            return None
        raise AssertionError(cmd.op)

    def dump(self, pid: int) -> str:
        st = self.state
        pd = st.partitions[pid]
        lines = [f"p{pid} parent={'-' if pd.parent is None else f'p{pd.parent}'} "
                 f"children={','.join(f'p{c}' for c in pd.children) or '-'} "
                 f"structures={pd.structure_count} free={pd.free_slot_count} "
                 f"first_free={pd.first_free_slot} footprint={st.footprint(pid)}B"]
        for slot, e in pd.present():
            flags = []
            if e.accessible:
                flags.append("accessible")
            if e.shared_with is not None:
                flags.append(f"lent:p{e.shared_with}@{e.child_link[1]}")
            if e.backs is not None:
                flags.append(str(e.backs))
            if e.is_cut_product:
                flags.append(f"cut-from:{e.cut_from}")
            regions = [str(i) for i, s in enumerate(pd.mpu_map) if s == slot]
            if regions:
                flags.append("mpu:" + ",".join(regions))
            lines.append(f"  {slot} {e.range} {e.rights} {' '.join(flags)}")
        return "\n".join(lines)

    def execute(self, cmd: Command) -> Outcome:
        if cmd.op == "layout":
            try:
                return Outcome(cmd, "ok", self._layout(cmd))
            except ValueError as exc:
                return Outcome(cmd, "fail", message=str(exc))
        if self.state is None:
            return Outcome(cmd, "fail", message="scenario must start with a layout")
        try:
            outcome = self._execute(cmd)
        except UnknownAlias as exc:
            return Outcome(cmd, "skipped" if self.lenient else "fail", message=str(exc))
        if self.check and cmd.op in MUTATING and outcome.status == "ok":
            outcome.violations = self.last_violations = check_all(self.state)
            if outcome.violations:
                outcome.status = "fail"
                outcome.message = f"{len(outcome.violations)} invariant violation(s)"
        return outcome

    def _execute(self, cmd: Command) -> Outcome:
        st = self.state
        if cmd.op == "access":
            addr = int(cmd.args[0], 0)
            verdict = st.simulate_access(addr, AccessType.parse(cmd.args[1]))
            got = "ok" if verdict else "fault"
            if cmd.bind is not None and cmd.bind != got:
                return Outcome(cmd, "fail", got, message=f"expected {cmd.bind}")
            return Outcome(cmd, "ok", got)
        if cmd.op == "check":
            found = check_all(st)
            return Outcome(cmd, "fail" if found else "ok", f"{len(found)} violation(s)",
                           violations=found)
        if cmd.op == "dump":
            return Outcome(cmd, "ok", "\n" + self.dump(self.partition(cmd.args[0])))
        if cmd.op == "footprint":
            try:
                return Outcome(cmd, "ok", f"{compute_footprint(int(cmd.args[0], 0), st.constants)} B")
            except PipError as exc:
                return Outcome(cmd, "fail", error=exc.code.slug, message=str(exc))
        try:
            value = self._syscall(cmd)
        except PipError as exc:
            if cmd.expect_error is not None:
                if ErrorCode.from_slug(cmd.expect_error) == exc.code:
                    return Outcome(cmd, "ok", error=exc.code.slug, message="expected error")
                return Outcome(cmd, "fail", error=exc.code.slug,
                               message=f"expected {cmd.expect_error}, got {exc.code.slug}")
            return Outcome(cmd, "error" if self.lenient else "fail", error=exc.code.slug,
                           message=str(exc))
        if cmd.expect_error is not None:
            return Outcome(cmd, "fail", value, message=f"expected {cmd.expect_error}, call succeeded")
        return Outcome(cmd, "ok", value)


def run_scenario(commands: list[Command], profile: Optional[str] = None,
                 keep_going: bool = False, constants: KernelConstants = DEFAULT_CONSTANTS
                 ) -> ScenarioResult:
    runner = Runner(profile, constants)
    outcomes = []
    stopped = False
    if not commands or commands[0].op != "layout":
        first = commands[0] if commands else Command("layout")
        outcomes.append(Outcome(first, "fail", message="scenario must start with a layout"))
        return ScenarioResult(outcomes, [], None, {}, True)
    for cmd in commands:
        outcome = runner.execute(cmd)
        outcomes.append(outcome)
        if outcome.failed and not keep_going:
            stopped = True
            break
    final = check_all(runner.state) if runner.state is not None else []
    return ScenarioResult(outcomes, final, runner.state, dict(runner.aliases), stopped)
