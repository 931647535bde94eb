"""Kernel call layer: the nine memory-management calls plus activation/introspection.

Every call checks all of its preconditions before touching anything, so a
refused call (``PipError``) leaves the state exactly as it found it.
"""

from __future__ import annotations

import functools
import pickle
from collections import Counter
from dataclasses import dataclass
from typing import Optional

from .errors import ErrorCode, PipError
from .memory import BlockRange, MemoryLayout, split_at
from .metadata import (DEFAULT_CONSTANTS, Backing, BlockEntry, KernelConstants,
                       PartitionDescriptor, SearchStats, SlotRef, add_structure,
                       allocate_slot, find_block_entry, free_slot, remove_structure)
from .mpu import (ARMV8, RWX, RX, AccessType, MemoryFault, MpuProfile, MpuRegion,
                  MpuState, Rights, check_access, check_region_index, encode,
                  load_packed, validate_region)

SELF = "self"
ROOT = 0


@dataclass(frozen=True)
class BlockView:
    slot: SlotRef
    range: BlockRange
    rights: Rights
    accessible: bool
    shared_with: Optional[int]
    is_cut_product: bool
    parent_slot: Optional[SlotRef]
    backs: Optional[Backing]


def syscall(method):
    """Reset the per-call instrumentation before running a kernel call."""

    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        self.visits = Counter()
        self.searches = Counter()
        return method(self, *args, **kwargs)

    return wrapper


class SystemState:
    """Memory layout, partition tree and live MPU of one simulated device."""

    def __init__(self, layout: MemoryLayout, profile: MpuProfile = ARMV8,
                 constants: KernelConstants = DEFAULT_CONSTANTS,
                 flash_rights: Rights = RX, ram_rights: Rights = RWX):
        self.layout = layout
        self.profile = profile
        self.constants = constants
        self.partitions: dict[int, PartitionDescriptor] = {}
        self.next_pid = ROOT + 1
        # entry visits and child-side search probes of the last call, per partition
        self.visits: Counter = Counter()
        self.searches: Counter = Counter()

        root = PartitionDescriptor.empty(ROOT, None, None, constants, profile.region_count)
        # The root's first structure lives in the kernel RAM reserve.
        add_structure(root, constants, None, None)
        self.partitions[ROOT] = root
        self.root = ROOT
        self.active = ROOT
        self.initial_blocks: dict[str, SlotRef] = {}
        for segment, rights in (("ram", ram_rights), ("flash", flash_rights)):
            usable = layout.usable(segment)
            if usable is not None:
                self.initial_blocks[segment] = allocate_slot(root, BlockEntry(usable, rights))
        self.mpu = MpuState.disabled(profile.region_count)

    # -- helpers -----------------------------------------------------------

    def snapshot(self) -> bytes:
        """Byte image of everything a kernel call may change."""
        return pickle.dumps((self.partitions, self.root, self.active, self.mpu, self.next_pid))

    def partition(self, pid: int) -> PartitionDescriptor:
        return self.partitions[pid]

    def _caller(self, caller: Optional[int]) -> PartitionDescriptor:
        pid = self.active if caller is None else caller
        pd = self.partitions.get(pid)
        if pd is None:
            raise PipError(ErrorCode.CHILD_NOT_FOUND, f"unknown partition {pid}")
        return pd

    def _child(self, pd: PartitionDescriptor, child: int) -> PartitionDescriptor:
        if child not in pd.children:
            raise PipError(ErrorCode.CHILD_NOT_FOUND, f"p{child} is not a child of p{pd.pid}")
        return self.partitions[child]

    def _target(self, pd: PartitionDescriptor, target) -> PartitionDescriptor:
        if target is None or target == SELF or target == pd.pid:
            return pd
        return self._child(pd, target)

    def _entry(self, pd: PartitionDescriptor, slot: SlotRef) -> BlockEntry:
        self.visits[pd.pid] += 1
        entry = pd.entry(slot) if isinstance(slot, SlotRef) else None
        if entry is None:
            raise PipError(ErrorCode.BLOCK_NOT_FOUND, f"{slot} in p{pd.pid}")
        return entry

    @staticmethod
    def _require_usable(entry: BlockEntry, shared_code: ErrorCode = ErrorCode.BLOCK_INACCESSIBLE):
        if entry.shared_with is not None:
            raise PipError(shared_code, f"{entry.range} lent to p{entry.shared_with}")
        if not entry.accessible or entry.backs is not None:
            raise PipError(ErrorCode.BLOCK_INACCESSIBLE, str(entry.range))

    @staticmethod
    def _check_rights(requested: Rights, held: Rights) -> None:
        if not requested.subset_of(held):
            raise PipError(ErrorCode.RIGHTS_ELEVATION, f"{requested} over {held}")

    def _regions(self, pd: PartitionDescriptor) -> list[Optional[MpuRegion]]:
        regions = []
        for index, slot in enumerate(pd.mpu_map):
            if slot is None:
                regions.append(None)
                continue
            entry = self._entry(pd, slot)
            regions.append(MpuRegion(index, entry.range, entry.rights))
        return regions

    def _repack(self, pd: PartitionDescriptor) -> None:
        pd.packed = encode(self._regions(pd))
        if pd.pid == self.active:
            self.mpu = load_packed(pd.packed, self.profile.region_count, self.layout.address_bits)

    def _unmap(self, pd: PartitionDescriptor, *slots: SlotRef) -> None:
        """Drop MPU mappings of blocks that stop being usable or change shape."""
        hit = False
        for index, mapped in enumerate(pd.mpu_map):
            if mapped is not None and mapped in slots:
                pd.mpu_map[index] = None
                hit = True
        if hit:
            self._repack(pd)

    # -- partitions ----------------------------------------------------------

    @syscall
    def create_partition(self, block: SlotRef, caller: Optional[int] = None) -> int:
        pd = self._caller(caller)
        entry = self._entry(pd, block)
        self._require_usable(entry, ErrorCode.BLOCK_ALREADY_SHARED)
        if entry.range.size < self.constants.K:
            raise PipError(ErrorCode.BLOCK_TOO_SMALL,
                           f"{entry.range.size} B < {self.constants.K} B descriptor")
        pid = self.next_pid
        self.next_pid += 1
        self.partitions[pid] = PartitionDescriptor.empty(
            pid, pd.pid, (entry.range, block), self.constants, self.profile.region_count)
        pd.children.append(pid)
        entry.accessible = False
        entry.backs = Backing("descriptor", pid)
        self._unmap(pd, block)
        return pid

    @syscall
    def delete_partition(self, child: int, caller: Optional[int] = None) -> None:
        pd = self._caller(caller)
        victim = self._child(pd, child)
        if victim.children:
            raise PipError(ErrorCode.CHILD_NOT_EMPTY_REMOVAL, f"p{child} has children")
        for _, entry in pd.present():
            self.visits[pd.pid] += 1
            if entry.shared_with == child:
                entry.shared_with = None
                entry.child_link = None
                entry.accessible = True
            elif entry.backs is not None and entry.backs.partition == child:
                entry.backs = None
                entry.accessible = True
        pd.children.remove(child)
        del self.partitions[child]
        if self.active == child:
            self.active = pd.pid
            self.mpu = load_packed(pd.packed, self.profile.region_count, self.layout.address_bits)

    # -- kernel structures -------------------------------------------------

    @syscall
    def prepare(self, target, block: SlotRef, caller: Optional[int] = None) -> None:
        pd = self._caller(caller)
        tgt = self._target(pd, target)
        entry = self._entry(pd, block)
        self._require_usable(entry)
        if entry.range.size < self.constants.S:
            raise PipError(ErrorCode.BLOCK_TOO_SMALL,
                           f"{entry.range.size} B < {self.constants.S} B structure")
        if tgt.structure_count >= self.constants.max_structures:
            raise PipError(ErrorCode.MAX_STRUCTURES_REACHED, f"p{tgt.pid}")
        index = add_structure(tgt, self.constants, entry.range, (pd.pid, block))
        self.visits[tgt.pid] += self.constants.C
        entry.accessible = False
        entry.backs = Backing("structure", tgt.pid, index)
        self._unmap(pd, block)

    def collectable(self, pid: int) -> Optional[tuple[int, tuple[int, SlotRef]]]:
        """Highest empty structure of ``pid`` with its lender, if any."""
        if pid not in self.partitions:
            return None
        structures = self.partitions[pid].structures
        for index in reversed(range(len(structures))):
            ks = structures[index]
            # The boot structure has no lender to give it back to.
            if ks is not None and ks.used == 0 and ks.lender is not None:
                return index, ks.lender
        return None

    @syscall
    def collect(self, target=None, caller: Optional[int] = None) -> SlotRef:
        pd = self._caller(caller)
        tgt = self._target(pd, target)
        found = self.collectable(tgt.pid)
        if found is None:
            raise PipError(ErrorCode.STRUCTURE_NOT_EMPTY, f"p{tgt.pid}")
        index, (lender_pid, lender_slot) = found
        lender_entry = self._entry(self.partitions[lender_pid], lender_slot)
        remove_structure(tgt, index)
        self.visits[tgt.pid] += self.constants.C
        lender_entry.backs = None
        lender_entry.accessible = True
        return lender_slot

    # -- blocks ----------------------------------------------------------

    @syscall
    def add_memory_block(self, child: int, block: SlotRef, rights: Rights,
                         caller: Optional[int] = None) -> SlotRef:
        pd = self._caller(caller)
        dst = self._child(pd, child)
        entry = self._entry(pd, block)
        self._require_usable(entry, ErrorCode.BLOCK_ALREADY_SHARED)
        self._check_rights(rights, entry.rights)
        if dst.free_slot_count == 0:
            raise PipError(ErrorCode.NO_FREE_SLOT, f"p{child}")
        self.visits[child] += 1
        cslot = allocate_slot(dst, BlockEntry(entry.range, rights, parent_slot=block))
        entry.shared_with = child
        entry.child_link = (child, cslot)
        entry.accessible = False
        self._unmap(pd, block)
        return cslot

    @syscall
    def remove_memory_block(self, block: SlotRef, caller: Optional[int] = None) -> None:
        pd = self._caller(caller)
        entry = self._entry(pd, block)
        if entry.shared_with is None or entry.child_link is None:
            raise PipError(ErrorCode.BLOCK_NOT_FOUND, f"{block} is not shared")
        child_pid, cslot = entry.child_link
        child = self.partitions[child_pid]
        # Direct link: no search through the child's structures.
        cent = self._entry(child, cslot)
        if not (cent.usable and cent.cut_products == 0 and cent.range == entry.range
                and cslot not in child.mpu_map):
            raise PipError(ErrorCode.CHILD_NOT_EMPTY_REMOVAL,
                           f"p{child_pid} cut, lent, mapped or used {cent.range}")
        free_slot(child, cslot)
        entry.shared_with = None
        entry.child_link = None
        entry.accessible = True

    @syscall
    def cut_memory_block(self, block: SlotRef, cut: int, caller: Optional[int] = None) -> SlotRef:
        pd = self._caller(caller)
        entry = self._entry(pd, block)
        self._require_usable(entry)
        left, right = split_at(entry.range, cut)
        if pd.free_slot_count == 0:
            raise PipError(ErrorCode.NO_FREE_SLOT, f"p{pd.pid}")
        self._unmap(pd, block)
        entry.range = left
        entry.cut_products += 1
        return allocate_slot(pd, BlockEntry(right, entry.rights, cut_from=block))

    @syscall
    def merge_memory_blocks(self, left: SlotRef, right: SlotRef,
                            caller: Optional[int] = None) -> SlotRef:
        pd = self._caller(caller)
        lent = self._entry(pd, left)
        rent = self._entry(pd, right)
        self._require_usable(lent)
        self._require_usable(rent)
        if left == right or lent.range.end != rent.range.start:
            raise PipError(ErrorCode.NOT_A_CONTIGUOUS_PAIR, f"{lent.range} / {rent.range}")
        # Only the exact pair a cut produced merges back: the right half must
        # come from cutting the left one and carry no cuts of its own.
        if rent.cut_from != left or rent.cut_products or rent.rights != lent.rights:
            raise PipError(ErrorCode.NOT_CUT_SIBLINGS, f"{left} / {right}")
        self._unmap(pd, left, right)
        free_slot(pd, right)
        lent.range = BlockRange(lent.range.start, lent.range.size + rent.range.size)
        lent.cut_products -= 1
        return left

    # -- MPU ---------------------------------------------------------------

    @syscall
    def map_mpu(self, block: Optional[SlotRef], region: int, caller: Optional[int] = None) -> None:
        pd = self._caller(caller)
        check_region_index(self.profile, region)
        if block is not None:
            entry = self._entry(pd, block)
            self._require_usable(entry)
            validate_region(self.profile, entry.range, region)
        pd.mpu_map[region] = block
        self._repack(pd)

    @syscall
    def find_block(self, block: SlotRef, caller: Optional[int] = None) -> BlockView:
        pd = self._caller(caller)
        e = self._entry(pd, block)
        return BlockView(block, e.range, e.rights, e.accessible, e.shared_with,
                         e.is_cut_product, e.parent_slot, e.backs)

    @syscall
    def switch_partition(self, target: int) -> None:
        pd = self.partitions.get(target)
        if pd is None:
            raise PipError(ErrorCode.CHILD_NOT_FOUND, f"unknown partition {target}")
        self.active = target
        self.mpu = load_packed(pd.packed, self.profile.region_count, self.layout.address_bits)

    def simulate_access(self, addr: int, access: AccessType):
        """Check an access by the active partition against the live MPU.

        Faults are returned, never resolved by remapping.
        """
        return check_access(self.mpu, addr, access)

    def is_fault(self, addr: int, access: AccessType) -> bool:
        return isinstance(self.simulate_access(addr, access), MemoryFault)

    # -- reporting -------------------------------------------------------

    def footprint(self, pid: int) -> int:
        """Metadata bytes currently held by a partition (descriptor + structures)."""
        return self.constants.K + self.partitions[pid].structure_count * self.constants.S

    def search(self, pid: int, rng: BlockRange) -> tuple[SlotRef, BlockEntry]:
        """Linear search of a partition's blocks by exact range."""
        stats = SearchStats()
        try:
            return find_block_entry(self.partitions[pid], rng, stats)
        finally:
            self.searches[pid] += stats.probes
            self.visits[pid] += stats.probes
