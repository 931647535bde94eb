import pytest

from conftest import RAM, carve, grow
from pipmpu import ARMV7, MemoryLayout, SystemState
from pipmpu.errors import ErrorCode, PipError
from pipmpu.invariants import check_all
from pipmpu.memory import BlockRange
from pipmpu.metadata import SlotRef
from pipmpu.mpu import AccessType, MemoryFault, Rights

RW, R, RWX = Rights.parse("rw-"), Rights.parse("r--"), Rights.parse("rwx")
READ, WRITE, EXEC = AccessType.READ, AccessType.WRITE, AccessType.EXECUTE


def refused(st, fn, *args, **kwargs):
    """Call ``fn`` expecting a refusal; also assert the state did not move."""
    before = st.snapshot()
    with pytest.raises(PipError) as exc:
        fn(*args, **kwargs)
    assert st.snapshot() == before
    return exc.value.code


def test_boot_state(state):
    root = state.partitions[0]
    ram, flash = state.initial_blocks["ram"], state.initial_blocks["flash"]
    assert root.entry(ram).range == BlockRange(RAM + 1664, 0x40000 - 1664)
    assert root.entry(flash).range == BlockRange(9568, 0x100000 - 9568)
    assert root.entry(ram).rights == RWX and str(root.entry(flash).rights) == "r-x"
    assert check_all(state) == []


# -- create / delete ---------------------------------------------------------

def test_create_partition(state):
    desc, rest = carve(state, state.initial_blocks["ram"], 640)
    child = state.create_partition(desc)
    e = state.partitions[0].entry(desc)
    assert child in state.partitions and not e.accessible
    assert state.partitions[child].parent == 0
    assert state.partitions[child].descriptor == (e.range, desc)
    assert check_all(state) == []


def test_create_block_too_small(state):
    small, _ = carve(state, state.initial_blocks["ram"], 512)
    assert refused(state, state.create_partition, small) is ErrorCode.BLOCK_TOO_SMALL


def test_create_with_shared_block(family):
    st = family.st
    st.add_memory_block(family.child, family.a, RW)
    assert refused(st, st.create_partition, family.a) is ErrorCode.BLOCK_ALREADY_SHARED


def test_delete_returns_lent_blocks(family):
    st = family.st
    pieces = carve(st, family.spare, 64, 64, 64)
    for slot in pieces[:3]:
        st.add_memory_block(family.child, slot, RW)
    st.delete_partition(family.child)
    root = st.partitions[0]
    for slot in pieces[:3] + [family.desc, family.struct]:
        e = root.entry(slot)
        assert e.accessible and e.shared_with is None and e.backs is None
    assert family.child not in st.partitions and root.children == []
    assert check_all(st) == []


def test_delete_non_child(family):
    st = family.st
    assert refused(st, st.delete_partition, 99) is ErrorCode.CHILD_NOT_FOUND
    assert refused(st, st.delete_partition, 0) is ErrorCode.CHILD_NOT_FOUND


def test_delete_child_with_child(family):
    st = family.st
    c = family.child
    st.add_memory_block(c, family.a, RW)
    cslot = st.partitions[0].entry(family.a).child_link[1]
    gdesc, _ = carve(st, cslot, 640, caller=c)
    st.create_partition(gdesc, caller=c)
    assert refused(st, st.delete_partition, c) is ErrorCode.CHILD_NOT_EMPTY_REMOVAL


def test_delete_active_child_falls_back_to_parent(family):
    st = family.st
    st.switch_partition(family.child)
    st.delete_partition(family.child, caller=0)
    assert st.active == 0


# -- prepare / collect -------------------------------------------------------

def test_prepare_self_adds_eight_slots(state):
    blk, _ = carve(state, state.initial_blocks["ram"], 512)
    before = state.partitions[0].free_slot_count
    state.prepare("self", blk)
    assert state.partitions[0].free_slot_count == before + 8


def test_ninth_prepare(state):
    rest = grow(state, state.initial_blocks["ram"], 7)
    assert state.partitions[0].structure_count == 8
    blk, _ = carve(state, rest, 512)
    assert refused(state, state.prepare, "self", blk) is ErrorCode.MAX_STRUCTURES_REACHED


def test_prepare_block_too_small(family):
    st = family.st
    blk, _ = carve(st, family.spare, 480)
    assert refused(st, st.prepare, family.child, blk) is ErrorCode.BLOCK_TOO_SMALL


def test_prepare_foreign_partition(family):
    st = family.st
    other_desc, _ = carve(st, family.spare, 640)
    other = st.create_partition(other_desc)
    st.add_memory_block(family.child, family.a, RW)
    cslot = st.partitions[0].entry(family.a).child_link[1]
    assert refused(st, st.prepare, other, cslot, caller=family.child) is ErrorCode.CHILD_NOT_FOUND


def test_collect_second_structure(family):
    st = family.st
    second, _ = carve(st, family.spare, 512)
    st.prepare(family.child, second)
    back = st.collect(family.child)
    assert back == second
    e = st.partitions[0].entry(second)
    assert e.accessible and e.backs is None
    assert st.partitions[family.child].structure_count == 1
    assert check_all(st) == []


def test_collect_full_structure(family):
    st = family.st
    *pieces, _ = carve(st, family.spare, *[32] * 8)
    for p in pieces:
        st.add_memory_block(family.child, p, RW)
    assert refused(st, st.collect, family.child) is ErrorCode.STRUCTURE_NOT_EMPTY


def test_collect_fresh_child(state):
    desc, _ = carve(state, state.initial_blocks["ram"], 640)
    c = state.create_partition(desc)
    assert refused(state, state.collect, c) is ErrorCode.STRUCTURE_NOT_EMPTY


def test_boot_structure_is_never_collected(state):
    assert refused(state, state.collect, "self") is ErrorCode.STRUCTURE_NOT_EMPTY


# -- add / remove ------------------------------------------------------------

def test_add_lowers_rights(family):
    st = family.st
    cslot = st.add_memory_block(family.child, family.a, R)
    parent = st.partitions[0].entry(family.a)
    child = st.partitions[family.child].entry(cslot)
    assert child.rights == R and child.range == parent.range
    assert not parent.accessible and parent.shared_with == family.child
    assert parent.child_link == (family.child, cslot) and child.parent_slot == family.a


def test_add_rights_elevation(family):
    st = family.st
    code, _ = carve(st, st.initial_blocks["flash"], 1024)
    assert refused(st, st.add_memory_block, family.child, code, RW) is ErrorCode.RIGHTS_ELEVATION
    assert refused(st, st.add_memory_block, family.child, code, RWX) is ErrorCode.RIGHTS_ELEVATION
    st.add_memory_block(family.child, code, R)


def test_child_cannot_pass_on_more_than_it_holds(family):
    st = family.st
    c = family.child
    cslot = st.add_memory_block(c, family.a, R)
    gdesc, rest = carve(st, cslot, 640, caller=c)
    g = st.create_partition(gdesc, caller=c)
    gstruct, data, _ = carve(st, rest, 256, 64, caller=c)
    assert refused(st, st.prepare, g, gstruct, caller=c) is ErrorCode.BLOCK_TOO_SMALL
    assert refused(st, st.add_memory_block, g, data, RW, caller=c) is ErrorCode.RIGHTS_ELEVATION


def test_add_to_second_child(family):
    st = family.st
    other_desc, _ = carve(st, family.spare, 640)
    other = st.create_partition(other_desc)
    st.add_memory_block(family.child, family.a, RW)
    assert refused(st, st.add_memory_block, other, family.a, R) is ErrorCode.BLOCK_ALREADY_SHARED


def test_add_without_free_slot(state):
    desc, blk, _ = carve(state, state.initial_blocks["ram"], 640, 64)
    c = state.create_partition(desc)
    assert refused(state, state.add_memory_block, c, blk, RW) is ErrorCode.NO_FREE_SLOT


def test_remove_untouched_block(family):
    st = family.st
    cslot = st.add_memory_block(family.child, family.a, RW)
    st.remove_memory_block(family.a)
    e = st.partitions[0].entry(family.a)
    assert e.accessible and e.shared_with is None and e.child_link is None
    assert st.partitions[family.child].entry(cslot) is None
    assert sum(st.searches.values()) == 0
    assert check_all(st) == []


def test_remove_after_child_cut(family):
    st = family.st
    cslot = st.add_memory_block(family.child, family.a, RW)
    st.cut_memory_block(cslot, st.partitions[family.child].entry(cslot).range.start + 512,
                        caller=family.child)
    assert refused(st, st.remove_memory_block, family.a) is ErrorCode.CHILD_NOT_EMPTY_REMOVAL


def test_remove_after_child_mapped(family):
    st = family.st
    cslot = st.add_memory_block(family.child, family.a, RW)
    st.map_mpu(cslot, 3, caller=family.child)
    assert refused(st, st.remove_memory_block, family.a) is ErrorCode.CHILD_NOT_EMPTY_REMOVAL


def test_remove_unshared(family):
    st = family.st
    assert refused(st, st.remove_memory_block, family.a) is ErrorCode.BLOCK_NOT_FOUND


# -- cut / merge -------------------------------------------------------------

def test_cut_midpoint(family):
    st = family.st
    start = st.partitions[0].entry(family.a).range.start
    right = st.cut_memory_block(family.a, start + 512)
    root = st.partitions[0]
    assert root.entry(family.a).range == BlockRange(start, 512)
    assert root.entry(right).range == BlockRange(start + 512, 512)
    assert root.entry(right).is_cut_product
    assert check_all(st) == []


def test_cut_with_64_entries(state):
    grow(state, state.initial_blocks["ram"], 7)
    root = state.partitions[0]
    while root.free_slot_count:
        big = max((e.range.size, s) for s, e in root.present() if e.usable)[1]
        state.cut_memory_block(big, root.entry(big).range.start + 32)
    assert sum(1 for _ in root.present()) == 64
    big = max((e.range.size, s) for s, e in root.present() if e.usable)[1]
    assert refused(state, state.cut_memory_block, big, root.entry(big).range.start + 32) \
        is ErrorCode.NO_FREE_SLOT


def test_cut_at_start(family):
    st = family.st
    start = st.partitions[0].entry(family.a).range.start
    assert refused(st, st.cut_memory_block, family.a, start) is ErrorCode.CUT_OUT_OF_BOUNDS
    assert refused(st, st.cut_memory_block, family.a, start + 16) is ErrorCode.UNALIGNED_CUT


def test_cut_lent_block(family):
    st = family.st
    st.add_memory_block(family.child, family.a, RW)
    start = st.partitions[0].entry(family.a).range.start
    assert refused(st, st.cut_memory_block, family.a, start + 64) is ErrorCode.BLOCK_INACCESSIBLE


def test_merge_restores(family):
    st = family.st
    root = st.partitions[0]
    original = root.entry(family.a).range
    products = root.entry(family.a).cut_products
    right = st.cut_memory_block(family.a, original.start + 256)
    assert st.merge_memory_blocks(family.a, right) == family.a
    assert root.entry(family.a).range == original and root.entry(right) is None
    assert root.entry(family.a).cut_products == products


def test_merge_never_one(family):
    st = family.st
    # a and b sit next to each other but were carved from b0 separately
    root = st.partitions[0]
    assert root.entry(family.a).range.end == root.entry(family.b).range.start
    assert refused(st, st.merge_memory_blocks, family.a, family.b) is ErrorCode.NOT_CUT_SIBLINGS


def test_merge_non_adjacent(family):
    st = family.st
    assert refused(st, st.merge_memory_blocks, family.a, family.spare) is ErrorCode.NOT_A_CONTIGUOUS_PAIR
    assert refused(st, st.merge_memory_blocks, family.b, family.a) is ErrorCode.NOT_A_CONTIGUOUS_PAIR


# -- MPU ---------------------------------------------------------------------

def test_map_block_to_region(family):
    st = family.st
    blk, _ = carve(st, family.spare, 96)
    st.map_mpu(blk, 3)
    region = st.mpu.regions[3]
    e = st.partitions[0].entry(blk)
    assert region.range == e.range and region.rights == e.rights


def test_map_reserved_region_armv7(state7):
    st = state7
    blk, _ = carve(st, st.initial_blocks["ram"], 2048)
    assert refused(st, st.map_mpu, blk, 0) is ErrorCode.RESERVED_REGION


def test_map_none_clears(family):
    st = family.st
    st.map_mpu(family.b, 3)
    st.map_mpu(None, 3)
    assert st.mpu.regions[3] is None and st.partitions[0].packed == ()


def test_map_lent_block(family):
    st = family.st
    st.add_memory_block(family.child, family.a, RW)
    assert refused(st, st.map_mpu, family.a, 2) is ErrorCode.BLOCK_INACCESSIBLE


def test_lending_unmaps(family):
    st = family.st
    st.map_mpu(family.a, 2)
    st.add_memory_block(family.child, family.a, RW)
    assert st.mpu.regions[2] is None
    assert check_all(st) == []


# -- findBlock / switch / access ---------------------------------------------

def test_find_block_views(family):
    st = family.st
    st.add_memory_block(family.child, family.a, RW)
    assert st.find_block(family.a).shared_with == family.child
    start = st.partitions[0].entry(family.b).range.start
    right = st.cut_memory_block(family.b, start + 128)
    assert st.find_block(right).is_cut_product
    free = st.partitions[0].first_free_slot
    assert refused(st, st.find_block, free) is ErrorCode.BLOCK_NOT_FOUND


def test_switch_round_trip(family):
    st = family.st
    st.map_mpu(family.b, 1)
    cslot = st.add_memory_block(family.child, family.a, R)
    st.map_mpu(cslot, 5, caller=family.child)
    root_mpu = st.mpu
    st.switch_partition(family.child)
    child_mpu = st.mpu
    assert child_mpu.regions[5] is not None and child_mpu.regions[1] is None
    st.switch_partition(0)
    assert st.mpu == root_mpu
    st.switch_partition(family.child)
    assert st.mpu == child_mpu


def test_switch_to_self_is_noop(family):
    st = family.st
    parts = st.snapshot()
    st.switch_partition(0)
    assert st.snapshot() == parts


def test_switch_to_deleted(family):
    st = family.st
    st.delete_partition(family.child)
    assert refused(st, st.switch_partition, family.child) is ErrorCode.CHILD_NOT_FOUND


def test_access_verdicts(family):
    st = family.st
    e = st.partitions[0].entry(family.b).range
    st.map_mpu(family.b, 1)
    assert st.simulate_access(e.start, READ)
    assert not st.simulate_access(e.end, READ)
    owned = st.partitions[0].entry(family.spare).range.start
    assert isinstance(st.simulate_access(owned, READ), MemoryFault)
    assert st.is_fault(RAM, READ) and st.is_fault(0, EXEC)


def test_fault_is_not_resolved(family):
    st = family.st
    before = st.snapshot()
    st.simulate_access(RAM, WRITE)
    assert st.snapshot() == before


def test_visits_bounded_by_capacity(state):
    rest = grow(state, state.initial_blocks["ram"], 7)
    root = state.partitions[0]
    while root.free_slot_count > 2:
        big = max((e.range.size, s) for s, e in root.present() if e.usable)[1]
        state.cut_memory_block(big, root.entry(big).range.start + 32)
    desc = max((e.range.size, s) for s, e in root.present() if e.usable)[1]
    c = state.create_partition(carve(state, desc, 640)[0])
    state.delete_partition(c)
    assert max(state.visits.values()) <= 64


def test_constants_scale(board):
    from pipmpu.metadata import KernelConstants

    st = SystemState(board, constants=KernelConstants(C=4, max_structures=2))
    assert st.partitions[0].free_slot_count == 2


def test_footprint_of_live_partition(family):
    st = family.st
    assert st.footprint(0) == 1664          # boot structure plus one prepared
    assert st.footprint(family.child) == 1152
    blk, _ = carve(st, family.spare, 512)
    st.prepare(family.child, blk)
    assert st.footprint(family.child) == 1664


def test_tiny_layout_without_usable_ram():
    lay = MemoryLayout.create(0, 1024, 0x1000, 1024, 0, 1024)
    st = SystemState(lay, ARMV7)
    assert "ram" not in st.initial_blocks and "flash" in st.initial_blocks
    assert check_all(st) == []
