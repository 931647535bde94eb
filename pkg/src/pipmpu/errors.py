"""Error codes shared by every layer of the model."""

from enum import Enum


class ErrorCode(Enum):
    NO_FREE_SLOT = "NoFreeSlot"
    BLOCK_NOT_FOUND = "BlockNotFound"
    BLOCK_INACCESSIBLE = "BlockInaccessible"
    BLOCK_ALREADY_SHARED = "BlockAlreadyShared"
    BLOCK_TOO_SMALL = "BlockTooSmall"
    RIGHTS_ELEVATION = "RightsElevation"
    CHILD_NOT_FOUND = "ChildNotFound"
    CHILD_NOT_EMPTY_REMOVAL = "ChildNotEmptyRemoval"
    NOT_CUT_SIBLINGS = "NotCutSiblings"
    MAX_STRUCTURES_REACHED = "MaxStructuresReached"
    STRUCTURE_NOT_EMPTY = "StructureNotEmpty"
    ALIGNMENT_VIOLATION = "AlignmentViolation"
    RESERVED_REGION = "ReservedRegion"
    INDEX_OUT_OF_RANGE = "IndexOutOfRange"
    UNALIGNED_CUT = "UnalignedCut"
    CUT_OUT_OF_BOUNDS = "CutOutOfBounds"
    RESULT_TOO_SMALL = "ResultTooSmall"
    NOT_A_CONTIGUOUS_PAIR = "NotAContiguousPair"
    BLOCK_COUNT_OUT_OF_RANGE = "BlockCountOutOfRange"
    SLOT_NOT_PRESENT = "SlotNotPresent"

    @property
    def slug(self) -> str:
        """Kebab-case name used by scenario scripts (``rights-elevation``)."""
        return self.name.lower().replace("_", "-")

    @classmethod
    def from_slug(cls, slug: str) -> "ErrorCode":
        for code in cls:
            if code.slug == slug or code.value == slug:
                return code
        raise KeyError(slug)


class PipError(Exception):
    """A refused kernel call. The system state is left untouched."""

    def __init__(self, code: ErrorCode, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code.value}: {detail}" if detail else code.value)


class MalformedPacked(ValueError):
    pass


class SpaceTooLarge(ValueError):
    pass
