"""Partition-tree metadata: descriptors, kernel structures, block entries.

Each partition owns up to ``max_structures`` kernel structures of ``C`` block
entry slots. Free slots of all structures form one LIFO chain whose head is the
partition's first available slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from .errors import ErrorCode, PipError
from .memory import MIN_BLOCK, BlockRange
from .mpu import PackedMpuConfig, Rights


@dataclass(frozen=True)
class KernelConstants:
    K: int = 640            # incompressible per-partition metadata, bytes
    C: int = 8              # entries per kernel structure
    S: int = 512            # bytes per kernel structure
    max_structures: int = 8
    min_block: int = MIN_BLOCK

    @property
    def max_blocks(self) -> int:
        return max_blocks(self)


DEFAULT_CONSTANTS = KernelConstants()


def max_blocks(k: KernelConstants = DEFAULT_CONSTANTS) -> int:
    return k.C * k.max_structures


def compute_footprint(blocks: int, k: KernelConstants = DEFAULT_CONSTANTS) -> int:
    """RAM bytes of metadata needed by a partition registering ``blocks`` blocks.

    One structure is needed per started group of ``C`` blocks, hence the ceiling.
    """
    if not 1 <= blocks <= max_blocks(k):
        raise PipError(ErrorCode.BLOCK_COUNT_OUT_OF_RANGE, str(blocks))
    return k.K + -(-blocks // k.C) * k.S


@dataclass(frozen=True, order=True)
class SlotRef:
    structure: int
    entry: int

    def __str__(self) -> str:
        return f"s{self.structure}.{self.entry}"

    @classmethod
    def parse(cls, text: str) -> "SlotRef":
        if not text.startswith("s") or "." not in text:
            raise ValueError(f"bad slot reference {text!r}")
        s, e = text[1:].split(".", 1)
        return cls(int(s), int(e))


@dataclass(frozen=True)
class Backing:
    """Marks an entry whose memory holds kernel metadata of ``partition``."""

    kind: str                       # "descriptor" | "structure"
    partition: int
    structure: Optional[int] = None

    def __str__(self) -> str:
        if self.kind == "descriptor":
            return f"descriptor(p{self.partition})"
        return f"structure(p{self.partition}#{self.structure})"


@dataclass
class BlockEntry:
    range: BlockRange
    rights: Rights
    accessible: bool = True
    shared_with: Optional[int] = None
    child_link: Optional[tuple[int, SlotRef]] = None
    parent_slot: Optional[SlotRef] = None
    cut_from: Optional[SlotRef] = None   # left sibling this block was cut off
    cut_products: int = 0                # live blocks cut off this one
    backs: Optional[Backing] = None

    @property
    def is_cut_product(self) -> bool:
        return self.cut_from is not None

    @property
    def usable(self) -> bool:
        return self.accessible and self.shared_with is None and self.backs is None


@dataclass
class KernelStructure:
    backing: Optional[BlockRange]                  # None: boot structure in kernel RAM
    lender: Optional[tuple[int, SlotRef]]          # entry holding this structure
    entries: list[Optional[BlockEntry]]
    used: int = 0


@dataclass
class PartitionDescriptor:
    pid: int
    parent: Optional[int]
    descriptor: Optional[tuple[BlockRange, SlotRef]]   # block in the parent
    structures: list[Optional[KernelStructure]]
    mpu_map: list[Optional[SlotRef]]
    free_slots: dict[SlotRef, None] = field(default_factory=dict)
    free_slot_count: int = 0
    packed: PackedMpuConfig = ()
    children: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, pid: int, parent: Optional[int], descriptor, k: KernelConstants,
              region_count: int) -> "PartitionDescriptor":
        return cls(pid, parent, descriptor, [None] * k.max_structures, [None] * region_count)

    @property
    def first_free_slot(self) -> Optional[SlotRef]:
        return next(reversed(self.free_slots), None)

    @property
    def structure_count(self) -> int:
        return sum(s is not None for s in self.structures)

    def entry(self, slot: SlotRef) -> Optional[BlockEntry]:
        if not (0 <= slot.structure < len(self.structures)):
            return None
        ks = self.structures[slot.structure]
        if ks is None or not 0 <= slot.entry < len(ks.entries):
            return None
        return ks.entries[slot.entry]

    def present(self) -> Iterator[tuple[SlotRef, BlockEntry]]:
        for si, ks in enumerate(self.structures):
            if ks is None:
                continue
            for ei, e in enumerate(ks.entries):
                if e is not None:
                    yield SlotRef(si, ei), e


def add_structure(pd: PartitionDescriptor, k: KernelConstants, backing: Optional[BlockRange],
                  lender: Optional[tuple[int, SlotRef]]) -> int:
    """Install a fresh structure at the lowest free position; its slots go on top
    of the free chain with entry 0 first out."""
    index = pd.structures.index(None)
    pd.structures[index] = KernelStructure(backing, lender, [None] * k.C)
    for ei in reversed(range(k.C)):
        pd.free_slots[SlotRef(index, ei)] = None
    pd.free_slot_count += k.C
    return index


def remove_structure(pd: PartitionDescriptor, index: int) -> KernelStructure:
    ks = pd.structures[index]
    assert ks is not None and ks.used == 0
    for ei in range(len(ks.entries)):
        del pd.free_slots[SlotRef(index, ei)]
    pd.free_slot_count -= len(ks.entries)
    pd.structures[index] = None
    return ks


def allocate_slot(pd: PartitionDescriptor, entry: BlockEntry) -> SlotRef:
    if pd.free_slot_count <= 0 or not pd.free_slots:
        raise PipError(ErrorCode.NO_FREE_SLOT, f"partition p{pd.pid}")
    slot, _ = pd.free_slots.popitem()
    pd.free_slot_count -= 1
    ks = pd.structures[slot.structure]
    ks.entries[slot.entry] = entry
    ks.used += 1
    return slot


def free_slot(pd: PartitionDescriptor, slot: SlotRef) -> BlockEntry:
    entry = pd.entry(slot)
    if entry is None:
        raise PipError(ErrorCode.SLOT_NOT_PRESENT, str(slot))
    ks = pd.structures[slot.structure]
    ks.entries[slot.entry] = None
    ks.used -= 1
    pd.free_slots[slot] = None
    pd.free_slot_count += 1
    return entry


@dataclass
class SearchStats:
    probes: int = 0


def find_block_entry(pd: PartitionDescriptor, key: Union[SlotRef, BlockRange],
                     stats: Optional[SearchStats] = None) -> tuple[SlotRef, BlockEntry]:
    """Look a block up by slot (direct) or by exact range (linear search)."""
    if isinstance(key, SlotRef):
        entry = pd.entry(key)
        if stats is not None:
            stats.probes += 1
        if entry is None:
            raise PipError(ErrorCode.BLOCK_NOT_FOUND, str(key))
        return key, entry
    for slot, entry in pd.present():
        if stats is not None:
            stats.probes += 1
        if entry.range == key:
            return slot, entry
    raise PipError(ErrorCode.BLOCK_NOT_FOUND, str(key))
