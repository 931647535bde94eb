"""Executable model of a partition-tree kernel protecting memory with an MPU."""

from .errors import ErrorCode, PipError
from .memory import MIN_BLOCK, BlockRange, MemoryLayout
from .metadata import DEFAULT_CONSTANTS, KernelConstants, SlotRef, compute_footprint, max_blocks
from .mpu import ARMV7, ARMV8, AccessType, MpuProfile, MpuRegion, Rights
from .services import ROOT, SELF, SystemState
from .invariants import (Violation, ViolationKind, accessible_ratio, build_flat_rights_map,
                         check_all)
from .scenario import ParseError, parse_scenario, run_scenario
from .fuzz import fuzz

__all__ = [
    "ARMV7", "ARMV8", "AccessType", "BlockRange", "DEFAULT_CONSTANTS", "ErrorCode",
    "KernelConstants", "MIN_BLOCK", "MemoryLayout", "MpuProfile", "MpuRegion", "ParseError",
    "PipError", "ROOT", "Rights", "SELF", "SlotRef", "SystemState", "Violation", "ViolationKind",
    "accessible_ratio", "build_flat_rights_map", "check_all", "compute_footprint", "fuzz",
    "max_blocks", "parse_scenario", "run_scenario",
]
