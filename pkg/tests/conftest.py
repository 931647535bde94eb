import os
from typing import Optional

import pytest
from hypothesis import HealthCheck, settings

from pipmpu import ARMV7, ARMV8, MemoryLayout, Rights, SystemState

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=1000, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

RAM = 0x20000000
KFLASH, KRAM = 9544, 1664


@pytest.fixture
def board():
    """1 MiB flash, 256 KiB RAM, reserves of the reference kernel build."""
    return MemoryLayout.create(0x0, 0x100000, RAM, 0x40000, KFLASH, KRAM)


@pytest.fixture
def small():
    return MemoryLayout.create(0x0, 64 << 10, RAM, 16 << 10, KFLASH, KRAM)


@pytest.fixture
def state(board):
    return SystemState(board, ARMV8)


@pytest.fixture
def state7(board):
    return SystemState(board, ARMV7)


def grow(st, slot, count, caller=None):
    """Prepare ``count`` more structures for the caller, carved from ``slot``."""
    for _ in range(count):
        piece, slot = carve(st, slot, 512, caller=caller)
        st.prepare("self", piece, caller=caller)
    return slot


def carve(st, slot, *sizes, caller=None):
    """Cut consecutive pieces of ``sizes`` bytes off the front of ``slot``.

    Returns the slots of the pieces followed by the slot of the remainder."""
    pd = st.partitions[st.active if caller is None else caller]
    out = []
    for size in sizes:
        start = pd.entry(slot).range.start
        rest = st.cut_memory_block(slot, start + size, caller=caller)
        out.append(slot)
        slot = rest
    return out + [slot]


class Family:
    """Root with one created and prepared child; ``spare`` is root RAM left over.

    Root first gets a second structure so tests have slots to spare."""

    def __init__(self, st):
        self.st = st
        ram = st.initial_blocks["ram"]
        self.root_struct, ram = carve(st, ram, 512)
        st.prepare("self", self.root_struct)
        self.desc, self.struct, self.a, self.b, self.spare = carve(st, ram, 640, 512, 1024, 256)
        self.child = st.create_partition(self.desc)
        st.prepare(self.child, self.struct)


@pytest.fixture
def family(state):
    return Family(state)


RW = Rights.parse("rw-")
R = Rights.parse("r--")


# -- acceptance verdict lines ----------------------------------------------------

VERDICTS: dict[int, str] = {}


def record(number: int, title: str, passed: Optional[bool], detail: str) -> bool:
    status = "OUT OF SCOPE" if passed is None else "PASS" if passed else "FAIL"
    line = f"criterion {number}: {status}  {title}  ({detail})"
    VERDICTS[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
