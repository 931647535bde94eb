"""Simulated MPU: region registers, profile rules, packed loading, access checks."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

from .errors import ErrorCode, MalformedPacked, PipError
from .memory import MIN_BLOCK, BlockRange


@dataclass(frozen=True)
class Rights:
    read: bool = False
    write: bool = False
    execute: bool = False

    def subset_of(self, other: "Rights") -> bool:
        return ((not self.read or other.read)
                and (not self.write or other.write)
                and (not self.execute or other.execute))

    def allows(self, access: "AccessType") -> bool:
        return getattr(self, access.value)

    @property
    def bits(self) -> int:
        return self.read | self.write << 1 | self.execute << 2

    @classmethod
    def from_bits(cls, bits: int) -> "Rights":
        return cls(bool(bits & 1), bool(bits & 2), bool(bits & 4))

    @classmethod
    def parse(cls, text: str) -> "Rights":
        """Parse ``rwx``-style strings: ``r--``, ``rw-``, ``r-x``..."""
        if len(text) != 3 or any(c not in allowed for c, allowed in zip(text, ("r-", "w-", "x-"))):
            raise ValueError(f"bad rights string {text!r}")
        return cls(text[0] == "r", text[1] == "w", text[2] == "x")

    def __str__(self) -> str:
        return ("r" if self.read else "-") + ("w" if self.write else "-") + ("x" if self.execute else "-")


RWX = Rights(True, True, True)
RX = Rights(True, False, True)
NO_RIGHTS = Rights()


class AccessType(Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"

    @classmethod
    def parse(cls, text: str) -> "AccessType":
        return {"read": cls.READ, "r": cls.READ, "write": cls.WRITE, "w": cls.WRITE,
                "exec": cls.EXECUTE, "execute": cls.EXECUTE, "x": cls.EXECUTE}[text]


class Alignment(Enum):
    EXACT32 = "exact32"
    POWER_OF_TWO = "power-of-two"


@dataclass(frozen=True)
class MpuProfile:
    name: str
    region_count: int = 8
    reserved_regions: int = 0
    alignment: Alignment = Alignment.EXACT32

    def __post_init__(self):
        if not 8 <= self.region_count <= 16:
            raise ValueError("region count must be within 8..16")
        if not 0 <= self.reserved_regions < self.region_count:
            raise ValueError("reserved regions must leave at least one user region")

    @classmethod
    def named(cls, name: str, region_count: int = 8) -> "MpuProfile":
        if name == "armv8":
            return cls("armv8", region_count, 0, Alignment.EXACT32)
        if name == "armv7":
            return cls("armv7", region_count, 2, Alignment.POWER_OF_TWO)
        raise ValueError(f"unknown MPU profile {name!r}")


ARMV7 = MpuProfile.named("armv7")
ARMV8 = MpuProfile.named("armv8")


@dataclass(frozen=True)
class MpuRegion:
    index: int
    range: BlockRange
    rights: Rights
    enabled: bool = True


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def check_region_index(profile: MpuProfile, index: int) -> None:
    if not 0 <= index < profile.region_count:
        raise PipError(ErrorCode.INDEX_OUT_OF_RANGE, f"region {index}")
    if index < profile.reserved_regions:
        raise PipError(ErrorCode.RESERVED_REGION, f"region {index}")


def validate_region(profile: MpuProfile, rng: BlockRange, index: int) -> None:
    """Raise unless ``rng`` may occupy user region ``index`` under ``profile``."""
    check_region_index(profile, index)
    if rng.start % MIN_BLOCK or rng.size % MIN_BLOCK:
        raise PipError(ErrorCode.ALIGNMENT_VIOLATION, str(rng))
    if profile.alignment is Alignment.POWER_OF_TWO:
        if not _is_power_of_two(rng.size) or rng.start % rng.size:
            raise PipError(ErrorCode.ALIGNMENT_VIOLATION,
                           f"{rng} is not a naturally aligned power of two")


# Packed register pair layout (self-consistent, not hardware bit-exact):
#   base word: start[31:5] | VALID (bit 4) | region index [3:0]
#   attr word: (end - 32)[31:5] | X (bit 3) | W (bit 2) | R (bit 1) | ENABLE (bit 0)
_VALID = 1 << 4
_ENABLE = 1
_LOW = MIN_BLOCK - 1

PackedMpuConfig = tuple[tuple[int, int], ...]


def encode_region(region: MpuRegion) -> tuple[int, int]:
    base = region.range.start | _VALID | region.index
    attr = (region.range.end - MIN_BLOCK) | region.rights.bits << 1 | int(region.enabled)
    return base, attr


def encode(regions: Iterable[Optional[MpuRegion]]) -> PackedMpuConfig:
    """Pack the enabled regions, ordered by region index."""
    live = sorted((r for r in regions if r is not None and r.enabled), key=lambda r: r.index)
    return tuple(encode_region(r) for r in live)


@dataclass(frozen=True)
class MpuState:
    """Live content of every region register; ``None`` marks a disabled region."""

    regions: tuple[Optional[MpuRegion], ...]

    @classmethod
    def disabled(cls, region_count: int = 8) -> "MpuState":
        return cls((None,) * region_count)

    def enabled(self) -> list[MpuRegion]:
        return [r for r in self.regions if r is not None]


def load_packed(config: PackedMpuConfig, region_count: int = 8, address_bits: int = 32) -> MpuState:
    regions: list[Optional[MpuRegion]] = [None] * region_count
    limit = 1 << address_bits
    for entry in config:
        try:
            base, attr = entry
        except (TypeError, ValueError):
            raise MalformedPacked(f"entry {entry!r} is not a register pair") from None
        if not (0 <= base < limit and 0 <= attr < limit):
            raise MalformedPacked(f"register word out of range in {entry!r}")
        if not base & _VALID:
            raise MalformedPacked(f"base word {base:#x} lacks the valid bit")
        index = base & 0xF
        if index >= region_count:
            raise MalformedPacked(f"region index {index} out of range")
        if regions[index] is not None:
            raise MalformedPacked(f"region {index} loaded twice")
        if not attr & _ENABLE:
            raise MalformedPacked(f"packed entry for region {index} is not enabled")
        start = base & ~_LOW
        end = (attr & ~_LOW) + MIN_BLOCK
        if end <= start:
            raise MalformedPacked(f"region {index} limit below base")
        rights = Rights.from_bits(attr >> 1 & 0x7)
        regions[index] = MpuRegion(index, BlockRange(start, end - start), rights)
    return MpuState(tuple(regions))


@dataclass(frozen=True)
class Allowed:
    def __bool__(self) -> bool:
        return True


@dataclass(frozen=True)
class MemoryFault:
    addr: int
    access: AccessType

    def __bool__(self) -> bool:
        return False


ALLOWED = Allowed()


def check_access(state: MpuState, addr: int, access: AccessType) -> Allowed | MemoryFault:
    # Overlapping enabled regions: union of their permissions.
    for region in state.regions:
        if region is not None and region.range.start <= addr < region.range.end \
                and region.rights.allows(access):
            return ALLOWED
    return MemoryFault(addr, access)
