"""Security-property checker and brute-force access oracle.

The checks rebuild their view from the raw block entries of every partition.
Cached bookkeeping (free-slot counters, the LIFO chain, packed MPU lists) is
never trusted; it is one of the things being checked.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .errors import MalformedPacked, SpaceTooLarge
from .memory import BlockRange, covers, intersection, ranges_overlap
from .metadata import Backing, BlockEntry, PartitionDescriptor, SlotRef
from .mpu import MpuRegion, encode, load_packed
from .services import SystemState

FLAT_MAP_LIMIT = 1 << 20


class ViolationKind(Enum):
    KERNEL_ISOLATION = "KernelIsolation"
    VERTICAL_SHARING = "VerticalSharing"
    HORIZONTAL_ISOLATION = "HorizontalIsolation"
    RIGHTS_ELEVATION = "RightsElevation"
    SHARING_UNIQUENESS = "SharingUniqueness"
    SLOT_ACCOUNTING = "SlotAccounting"
    LINK_COHERENCE = "LinkCoherence"
    PACKED_INCOHERENCE = "PackedIncoherence"
    INTRA_PARTITION_OVERLAP = "IntraPartitionOverlap"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    partitions: tuple[int, ...]
    detail: str
    slots: tuple[SlotRef, ...] = ()
    span: Optional[tuple[int, int]] = None

    def __str__(self) -> str:
        parts = ",".join(f"p{p}" for p in self.partitions)
        slots = ",".join(map(str, self.slots)) or "-"
        span = f"[{self.span[0]:#010x},{self.span[1]:#010x})" if self.span else "-"
        return f"{self.kind.value}\t{parts}\t{slots}\t{span}\t{self.detail}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "partitions": list(self.partitions),
            "slots": [str(s) for s in self.slots],
            "range": list(self.span) if self.span else None,
            "detail": self.detail,
        }


def render(violations: Iterable[Violation]) -> str:
    return "\n".join(str(v) for v in violations)


def to_json(violations: Iterable[Violation]) -> str:
    return json.dumps([v.to_dict() for v in violations], indent=2)


def _span(a: BlockRange, b: BlockRange) -> Optional[tuple[int, int]]:
    return intersection(a, b)


def metadata_ranges(state: SystemState) -> list[tuple[BlockRange, str]]:
    """Every range currently holding a descriptor or kernel structure."""
    out = []
    for pd in state.partitions.values():
        if pd.descriptor is not None:
            out.append((pd.descriptor[0], f"descriptor of p{pd.pid}"))
        for si, ks in enumerate(pd.structures):
            if ks is not None and ks.backing is not None:
                out.append((ks.backing, f"structure {si} of p{pd.pid}"))
    return out


def _own_space(state: SystemState, pd: PartitionDescriptor) -> list[BlockRange]:
    """All memory a partition holds: blocks plus metadata lent for it."""
    space = [e.range for _, e in pd.present()]
    if pd.descriptor is not None:
        space.append(pd.descriptor[0])
    for ks in pd.structures:
        if ks is not None and ks.backing is not None:
            space.append(ks.backing)
    return space


def check_kernel_isolation(state: SystemState) -> list[Violation]:
    protected = [(r, "kernel reserve") for r in state.layout.reserved()]
    protected += metadata_ranges(state)
    out = []
    for pd in state.partitions.values():
        for slot, e in pd.present():
            if not e.accessible:
                continue
            for rng, what in protected:
                if ranges_overlap(e.range, rng):
                    out.append(Violation(ViolationKind.KERNEL_ISOLATION, (pd.pid,),
                                         f"accessible block {e.range} overlaps {what}",
                                         (slot,), _span(e.range, rng)))
    return out


def _backing_ok(state: SystemState, owner: Optional[tuple[int, SlotRef]], rng: BlockRange,
                expected: Backing, allowed: tuple[int, ...]) -> bool:
    if owner is None or owner[0] not in allowed:
        return False
    holder = state.partitions.get(owner[0])
    entry = holder.entry(owner[1]) if holder is not None else None
    return entry is not None and entry.backs == expected and covers(entry.range, rng)


def check_vertical_sharing(state: SystemState) -> list[Violation]:
    out = []
    for pd in state.partitions.values():
        if pd.parent is None:
            continue
        parent = state.partitions.get(pd.parent)
        if parent is None:
            out.append(Violation(ViolationKind.VERTICAL_SHARING, (pd.pid,),
                                 f"parent p{pd.parent} does not exist"))
            continue
        lent = [e.range for _, e in parent.present() if e.shared_with == pd.pid]
        for slot, e in pd.present():
            if not any(covers(r, e.range) for r in lent):
                out.append(Violation(ViolationKind.VERTICAL_SHARING, (pd.pid, parent.pid),
                                     f"block {e.range} not lent by the parent", (slot,),
                                     (e.range.start, e.range.end)))
        if pd.descriptor is None:
            out.append(Violation(ViolationKind.VERTICAL_SHARING, (pd.pid,),
                                 "non-root partition without descriptor block"))
        else:
            rng, slot = pd.descriptor
            if not _backing_ok(state, (parent.pid, slot), rng, Backing("descriptor", pd.pid),
                               (parent.pid,)):
                out.append(Violation(ViolationKind.VERTICAL_SHARING, (pd.pid, parent.pid),
                                     f"descriptor {rng} not held by the parent", (slot,),
                                     (rng.start, rng.end)))
        for si, ks in enumerate(pd.structures):
            if ks is None:
                continue
            if ks.backing is None or not _backing_ok(
                    state, ks.lender, ks.backing, Backing("structure", pd.pid, si),
                    (pd.pid, parent.pid)):
                span = (ks.backing.start, ks.backing.end) if ks.backing else None
                out.append(Violation(ViolationKind.VERTICAL_SHARING, (pd.pid,),
                                     f"structure {si} not backed by own or parent block",
                                     span=span))
    return out


def check_horizontal_isolation(state: SystemState) -> list[Violation]:
    out = []
    for pd in state.partitions.values():
        # one block field, one child
        linked: dict[tuple, SlotRef] = {}
        for slot, e in pd.present():
            if e.shared_with is not None and not isinstance(e.shared_with, int):
                out.append(Violation(ViolationKind.SHARING_UNIQUENESS, (pd.pid,),
                                     f"block {e.range} shared with {e.shared_with!r}", (slot,),
                                     (e.range.start, e.range.end)))
            if e.child_link is not None:
                key = (e.child_link[0], e.child_link[1])
                if key in linked:
                    out.append(Violation(ViolationKind.SHARING_UNIQUENESS, (pd.pid,),
                                         f"child slot {key[1]} of p{key[0]} linked twice",
                                         (linked[key], slot)))
                linked[key] = slot

        if len(pd.children) < 2:
            continue
        spans = []
        for cid in pd.children:
            child = state.partitions.get(cid)
            if child is not None:
                spans.extend((r.start, r.end, cid) for r in _own_space(state, child))
        spans.sort()
        active: list[tuple[int, int, int]] = []
        for start, end, cid in spans:
            active = [a for a in active if a[1] > start]
            for a_start, a_end, a_cid in active:
                if a_cid != cid:
                    out.append(Violation(ViolationKind.HORIZONTAL_ISOLATION, (a_cid, cid),
                                         f"siblings under p{pd.pid} overlap",
                                         span=(max(a_start, start), min(a_end, end))))
            active.append((start, end, cid))
    return out


def check_rights_monotonicity(state: SystemState) -> list[Violation]:
    out = []
    for pd in state.partitions.values():
        parent = state.partitions.get(pd.parent) if pd.parent is not None else None
        if parent is None:
            continue
        lent = [e for _, e in parent.present() if e.shared_with == pd.pid]
        for slot, e in pd.present():
            for pe in lent:
                if covers(pe.range, e.range) and not e.rights.subset_of(pe.rights):
                    out.append(Violation(ViolationKind.RIGHTS_ELEVATION, (pd.pid, parent.pid),
                                         f"{e.rights} exceeds parent {pe.rights} on {e.range}",
                                         (slot,), (e.range.start, e.range.end)))
    return out


def _check_slots(pd: PartitionDescriptor) -> list[Violation]:
    out = []

    def bad(detail, *slots):
        out.append(Violation(ViolationKind.SLOT_ACCOUNTING, (pd.pid,), detail, slots))

    free = set()
    for si, ks in enumerate(pd.structures):
        if ks is None:
            continue
        used = 0
        for ei, e in enumerate(ks.entries):
            if e is None:
                free.add(SlotRef(si, ei))
            else:
                used += 1
        if used != ks.used:
            bad(f"structure {si} claims {ks.used} used slots, holds {used}")
    if pd.structure_count > len(pd.structures):
        bad("too many structures")
    if pd.free_slot_count != len(free):
        bad(f"free count {pd.free_slot_count} but {len(free)} free slots")
    chain = set(pd.free_slots)
    if chain != free or len(pd.free_slots) != len(free):
        bad("free chain disagrees with empty slots", *sorted(chain ^ free))
    head = pd.first_free_slot
    if free and head not in free:
        bad(f"first free slot {head} is not free")
    return out


def _check_links(state: SystemState, pd: PartitionDescriptor) -> list[Violation]:
    out = []

    def bad(detail, *slots, others=()):
        out.append(Violation(ViolationKind.LINK_COHERENCE, (pd.pid, *others), detail, slots))

    products = Counter()
    for slot, e in pd.present():
        if (e.shared_with is None) != (e.child_link is None):
            bad(f"{e.range}: sharing field and child link disagree", slot)
        if (e.shared_with is not None or e.backs is not None) and e.accessible:
            bad(f"{e.range}: lent or metadata block still accessible", slot)
        if e.child_link is not None:
            cid, cslot = e.child_link
            child = state.partitions.get(cid)
            cent = child.entry(cslot) if child is not None else None
            if child is None or child.parent != pd.pid or cid != e.shared_with:
                bad(f"{e.range}: child link to p{cid} is not a child", slot)
            elif cent is None or cent.parent_slot != slot or cent.range.start != e.range.start:
                bad(f"{e.range}: child entry {cslot} does not point back", slot, others=(cid,))
        if e.parent_slot is not None:
            parent = state.partitions.get(pd.parent) if pd.parent is not None else None
            pent = parent.entry(e.parent_slot) if parent is not None else None
            if pent is None or pent.child_link != (pd.pid, slot):
                bad(f"{e.range}: parent slot {e.parent_slot} does not link here", slot)
        if e.cut_from is not None:
            products[e.cut_from] += 1
            left = pd.entry(e.cut_from)
            if left is None:
                bad(f"{e.range}: cut sibling {e.cut_from} missing", slot)
        if e.backs is not None:
            b = e.backs
            target = state.partitions.get(b.partition)
            if target is None:
                bad(f"{e.range}: backs metadata of missing p{b.partition}", slot)
            elif b.kind == "descriptor":
                if target.descriptor is None or target.descriptor[1] != slot \
                        or target.parent != pd.pid:
                    bad(f"{e.range}: descriptor record of p{b.partition} elsewhere", slot)
            else:
                ks = target.structures[b.structure] if 0 <= b.structure < len(target.structures) else None
                if ks is None or ks.lender != (pd.pid, slot):
                    bad(f"{e.range}: structure record of p{b.partition} elsewhere", slot)
    for slot, e in pd.present():
        if e.cut_products != products.get(slot, 0):
            bad(f"{e.range}: {e.cut_products} cut products recorded, {products.get(slot, 0)} live",
                slot)
    for cid in pd.children:
        child = state.partitions.get(cid)
        if child is None or child.parent != pd.pid:
            bad(f"child list names p{cid} which is not a child")
    if pd.parent is not None:
        parent = state.partitions.get(pd.parent)
        if parent is None or pd.pid not in parent.children:
            bad(f"p{pd.pid} missing from its parent's child list")
    return out


def _check_packed(state: SystemState, pd: PartitionDescriptor) -> list[Violation]:
    out = []
    regions: list[Optional[MpuRegion]] = []
    for index, slot in enumerate(pd.mpu_map):
        if slot is None:
            regions.append(None)
            continue
        e = pd.entry(slot)
        if e is None or not e.usable:
            out.append(Violation(ViolationKind.PACKED_INCOHERENCE, (pd.pid,),
                                 f"region {index} maps a missing or unusable block", (slot,)))
            regions.append(None)
            continue
        regions.append(MpuRegion(index, e.range, e.rights))
    expected = encode(regions)
    if pd.packed != expected:
        out.append(Violation(ViolationKind.PACKED_INCOHERENCE, (pd.pid,),
                             "packed MPU list does not match the mapping list"))
    if pd.pid == state.active:
        try:
            live = load_packed(pd.packed, state.profile.region_count, state.layout.address_bits)
        except MalformedPacked as exc:
            live = None
            out.append(Violation(ViolationKind.PACKED_INCOHERENCE, (pd.pid,), str(exc)))
        if live is not None and live != state.mpu:
            out.append(Violation(ViolationKind.PACKED_INCOHERENCE, (pd.pid,),
                                 "live MPU differs from the active partition's packed list"))
    return out


def _check_overlap(pd: PartitionDescriptor) -> list[Violation]:
    out = []
    entries = sorted(((e.range.start, e.range.end, slot) for slot, e in pd.present()))
    for (s0, e0, a), (s1, e1, b) in zip(entries, entries[1:]):
        if s1 < e0:
            out.append(Violation(ViolationKind.INTRA_PARTITION_OVERLAP, (pd.pid,),
                                 "blocks of one partition overlap", (a, b), (s1, min(e0, e1))))
    return out


def check_structural(state: SystemState) -> list[Violation]:
    out = []
    if state.root not in state.partitions or state.partitions[state.root].parent is not None:
        out.append(Violation(ViolationKind.LINK_COHERENCE, (state.root,), "root missing or parented"))
    if state.active not in state.partitions:
        out.append(Violation(ViolationKind.LINK_COHERENCE, (state.active,), "active partition missing"))
    for pd in state.partitions.values():
        out += _check_slots(pd)
        out += _check_links(state, pd)
        out += _check_packed(state, pd)
        out += _check_overlap(pd)
    return out


CHECKERS = (
    check_kernel_isolation,
    check_vertical_sharing,
    check_horizontal_isolation,
    check_rights_monotonicity,
    check_structural,
)


def check_all(state: SystemState) -> list[Violation]:
    out = []
    for checker in CHECKERS:
        out += checker(state)
    return out


# -- brute-force oracle ----------------------------------------------------


@dataclass
class FlatRightsMap:
    """Per-byte rights (bit 0 read, 1 write, 2 execute) over each segment."""

    segments: dict[str, tuple[int, np.ndarray]]

    def rights_at(self, addr: int) -> int:
        for base, arr in self.segments.values():
            if base <= addr < base + len(arr):
                return int(arr[addr - base])
        return 0

    def mapped_bytes(self, segment: str) -> int:
        return int(np.count_nonzero(self.segments[segment][1]))


def _paint(segments, rng: BlockRange, bits: int, op: str) -> None:
    for base, arr in segments.values():
        lo, hi = max(rng.start, base), min(rng.end, base + len(arr))
        if lo < hi:
            if op == "or":
                arr[lo - base:hi - base] |= bits
            elif op == "and":
                arr[lo - base:hi - base] &= bits
            else:
                arr[lo - base:hi - base] = bits


def build_flat_rights_map(state: SystemState, pid: int, mapped_only: bool = False) -> FlatRightsMap:
    """Byte map of what ``pid`` may legitimately touch.

    Built from the partition's accessible entries, clipped to what its parent
    lent it (with the parent's rights), minus kernel and metadata memory. With
    ``mapped_only`` just the blocks selected in its MPU mapping list count.
    """
    layout = state.layout
    total = layout.flash.size + layout.ram.size
    if total > FLAT_MAP_LIMIT:
        raise SpaceTooLarge(f"{total} bytes exceed the {FLAT_MAP_LIMIT} byte oracle limit")
    segs = {name: (seg.start, np.zeros(seg.size, dtype=np.uint8))
            for name, seg in layout.segments().items()}
    pd = state.partitions[pid]
    chosen: Iterable[BlockEntry]
    if mapped_only:
        chosen = [pd.entry(s) for s in pd.mpu_map if s is not None]
    else:
        chosen = [e for _, e in pd.present()]
    for e in chosen:
        if e is not None and e.accessible:
            _paint(segs, e.range, e.rights.bits, "or")
    # walk up: each ancestor only hands down what it holds
    child = pd
    while child.parent is not None:
        parent = state.partitions[child.parent]
        mask = {name: (base, np.zeros_like(arr)) for name, (base, arr) in segs.items()}
        for _, e in parent.present():
            if e.shared_with == child.pid:
                _paint(mask, e.range, e.rights.bits, "or")
        for name, (_, arr) in segs.items():
            arr &= mask[name][1]
        child = parent
    for rng in layout.reserved():
        _paint(segs, rng, 0, "set")
    for rng, _ in metadata_ranges(state):
        _paint(segs, rng, 0, "set")
    return FlatRightsMap(segs)


def _union_length(ranges: list[tuple[int, int]]) -> int:
    total, cur_lo, cur_hi = 0, None, None
    for lo, hi in sorted(ranges):
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


def accessible_bytes(state: SystemState, pid: int, segment: str) -> int:
    """Bytes of a segment covered by the partition's accessible blocks."""
    seg = state.layout.segments()[segment]
    pieces = []
    for _, e in state.partitions[pid].present():
        if e.accessible:
            hit = intersection(e.range, seg)
            if hit:
                pieces.append(hit)
    return _union_length(pieces)


def accessible_ratio(state: SystemState, pid: int, segment: str) -> float:
    """Percentage of a segment the partition can use."""
    return 100.0 * accessible_bytes(state, pid, segment) / state.layout.segments()[segment].size
