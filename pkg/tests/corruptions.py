"""Single-field corruptions of a reachable state, one per violation kind."""

from conftest import carve
from pipmpu import ARMV8, MemoryLayout, Rights, SystemState
from pipmpu.invariants import (ViolationKind, check_horizontal_isolation, check_kernel_isolation,
                               check_rights_monotonicity, check_structural, check_vertical_sharing)
from pipmpu.memory import BlockRange


class Rich:
    """Root, two children holding lent blocks, a mapped region in each."""

    def __init__(self):
        lay = MemoryLayout.create(0x0, 64 << 10, 0x20000000, 16 << 10, 9544, 1664)
        st = self.st = SystemState(lay, ARMV8)
        ram = st.initial_blocks["ram"]
        extra, ram = carve(st, ram, 512)
        st.prepare("self", extra)
        d1, s1, d2, s2, self.a, self.b, self.spare = carve(st, ram, 640, 512, 640, 512, 256, 256)
        self.desc1, self.struct1 = d1, s1
        self.c1 = st.create_partition(d1)
        self.c2 = st.create_partition(d2)
        st.prepare(self.c1, s1)
        st.prepare(self.c2, s2)
        self.ca = st.add_memory_block(self.c1, self.a, Rights.parse("r--"))
        self.cb = st.add_memory_block(self.c2, self.b, Rights.parse("rw-"))
        self.code, _ = carve(st, st.initial_blocks["flash"], 1024)
        self.cf = st.add_memory_block(self.c1, self.code, Rights.parse("r-x"))
        st.map_mpu(self.ca, 2, caller=self.c1)
        st.map_mpu(self.spare, 1)

    def root(self):
        return self.st.partitions[0]

    def child(self, which):
        return self.st.partitions[which]


def _kernel(r):
    r.root().entry(r.struct1).accessible = True


def _vertical(r):
    e = r.child(r.c1).entry(r.ca)
    e.range = r.root().entry(r.spare).range


def _horizontal(r):
    r.child(r.c2).entry(r.cb).range = r.child(r.c1).entry(r.ca).range


def _rights(r):
    # the parent itself only holds r-x on flash
    r.child(r.c1).entry(r.cf).rights = Rights.parse("rwx")


def _sharing(r):
    r.root().entry(r.a).shared_with = (r.c1, r.c2)


def _slots(r):
    r.root().free_slot_count -= 1


def _links(r):
    r.root().entry(r.a).cut_products += 1


def _packed(r):
    r.root().mpu_map[4] = r.spare


def _overlap(r):
    e = r.root().entry(r.spare)
    e.range = BlockRange(e.range.start - 32, e.range.size)


CORRUPTIONS = {
    ViolationKind.KERNEL_ISOLATION: (_kernel, check_kernel_isolation),
    ViolationKind.VERTICAL_SHARING: (_vertical, check_vertical_sharing),
    ViolationKind.HORIZONTAL_ISOLATION: (_horizontal, check_horizontal_isolation),
    ViolationKind.RIGHTS_ELEVATION: (_rights, check_rights_monotonicity),
    ViolationKind.SHARING_UNIQUENESS: (_sharing, check_horizontal_isolation),
    ViolationKind.SLOT_ACCOUNTING: (_slots, check_structural),
    ViolationKind.LINK_COHERENCE: (_links, check_structural),
    ViolationKind.PACKED_INCOHERENCE: (_packed, check_structural),
    ViolationKind.INTRA_PARTITION_OVERLAP: (_overlap, check_structural),
}


def detected(kind):
    """Violations of ``kind`` its checker reports after the corruption."""
    corrupt, checker = CORRUPTIONS[kind]
    r = Rich()
    corrupt(r)
    return [v for v in checker(r.st) if v.kind is kind]
