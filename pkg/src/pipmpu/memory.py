"""Physical address-space arithmetic: block ranges, overlap, coverage, cuts."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ErrorCode, PipError

MIN_BLOCK = 32
DEFAULT_ADDRESS_BITS = 32


def align_up(value: int, alignment: int = MIN_BLOCK) -> int:
    return -(-value // alignment) * alignment


@dataclass(frozen=True, order=True)
class BlockRange:
    """Half-open byte range ``[start, start + size)`` at 32-byte granularity."""

    start: int
    size: int

    def __post_init__(self):
        if self.start < 0 or self.start % MIN_BLOCK:
            raise ValueError(f"block start {self.start:#x} is not 32-byte aligned")
        if self.size < MIN_BLOCK or self.size % MIN_BLOCK:
            raise ValueError(f"block size {self.size} is not a positive multiple of 32")

    @property
    def end(self) -> int:
        return self.start + self.size

    def contains(self, addr: int) -> bool:
        return self.start <= addr < self.end

    def fits(self, address_bits: int = DEFAULT_ADDRESS_BITS) -> bool:
        return self.end <= 1 << address_bits

    def __str__(self) -> str:
        return f"[{self.start:#010x}, {self.end:#010x})"


def ranges_overlap(a: BlockRange, b: BlockRange) -> bool:
    return a.start < b.end and b.start < a.end


def intersection(a: BlockRange, b: BlockRange) -> tuple[int, int] | None:
    """Byte interval shared by ``a`` and ``b`` as ``(lo, hi)``, or None."""
    lo, hi = max(a.start, b.start), min(a.end, b.end)
    return (lo, hi) if lo < hi else None


def covers(outer: BlockRange, inner: BlockRange) -> bool:
    return outer.start <= inner.start and inner.end <= outer.end


def split_at(rng: BlockRange, cut: int) -> tuple[BlockRange, BlockRange]:
    if cut % MIN_BLOCK:
        raise PipError(ErrorCode.UNALIGNED_CUT, f"{cut:#x}")
    if not rng.start < cut < rng.end:
        raise PipError(ErrorCode.CUT_OUT_OF_BOUNDS, f"{cut:#x} outside {rng}")
    # Both halves are >= 32 once the cut is aligned and strictly inside.
    if cut - rng.start < MIN_BLOCK or rng.end - cut < MIN_BLOCK:
        raise PipError(ErrorCode.RESULT_TOO_SMALL, f"{cut:#x} in {rng}")
    return BlockRange(rng.start, cut - rng.start), BlockRange(cut, rng.end - cut)


@dataclass(frozen=True)
class MemoryLayout:
    """Flash and RAM segments with the kernel-reserved prefix of each.

    Reserve sizes need not be 32-byte multiples; the usable part of a segment
    starts at the reserve rounded up to the next block boundary.
    """

    flash: BlockRange
    ram: BlockRange
    kernel_flash: int = 0
    kernel_ram: int = 0
    address_bits: int = DEFAULT_ADDRESS_BITS

    def __post_init__(self):
        if ranges_overlap(self.flash, self.ram):
            raise ValueError("flash and ram segments overlap")
        if not (self.flash.fits(self.address_bits) and self.ram.fits(self.address_bits)):
            raise ValueError("segment exceeds the address space")
        if not 0 <= self.kernel_flash <= self.flash.size:
            raise ValueError("kernel flash reserve larger than flash")
        if not 0 <= self.kernel_ram <= self.ram.size:
            raise ValueError("kernel ram reserve larger than ram")

    @classmethod
    def create(cls, flash_start: int, flash_size: int, ram_start: int, ram_size: int,
               kernel_flash: int = 0, kernel_ram: int = 0,
               address_bits: int = DEFAULT_ADDRESS_BITS) -> "MemoryLayout":
        return cls(BlockRange(flash_start, flash_size), BlockRange(ram_start, ram_size),
                   kernel_flash, kernel_ram, address_bits)

    def segments(self) -> dict[str, BlockRange]:
        return {"flash": self.flash, "ram": self.ram}

    def reserved(self) -> list[BlockRange]:
        """Kernel-owned prefixes, rounded up to block granularity."""
        out = []
        for seg, reserve in ((self.flash, self.kernel_flash), (self.ram, self.kernel_ram)):
            if reserve:
                out.append(BlockRange(seg.start, min(align_up(reserve), seg.size)))
        return out

    def usable(self, segment: str) -> BlockRange | None:
        seg = self.segments()[segment]
        reserve = self.kernel_flash if segment == "flash" else self.kernel_ram
        start = seg.start + align_up(reserve)
        if start >= seg.end:
            return None
        return BlockRange(start, seg.end - start)
