"""Tile and accumulator placement in bank memory, plus the register table.

A tile row ``r`` lives in the bank pair of unit ``r // 16``, lane ``r % 16``.
Columns are stored column-major: column ``c`` of a region occupies the
32-byte block at ``base + 32*c`` in each of the eight banks of the region's
residency (even banks 0,2,...,14 or odd banks 1,3,...,15).

Fixed map of every bank (byte offsets)::

    0        zero vector (256 B)
    256      -1.0 vector (16 halves)
    4096     tr0..tr3 home slots in even banks, acc0..acc3 in odd banks
             (131072 B each = 4096 columns x 32 B)
    528384   B scalar staging (1 MiB, bank 0 or all even banks)
    1576960  row-broadcast scratch (one slot)
    1708032  pool of fresh slots used by copy-on-write and relocation
"""

from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from . import fp16
from .device import BLOCK, DramCommand, NUM_UNITS, PseudoChannel
from .errors import LayoutError

ROWNUM = 128
MAX_COLS = 4096
LANES = 16
SLOT_BYTES = MAX_COLS * BLOCK          # 131072
ZERO_ADDR = 0
ZERO_BYTES = 256
MINUS_ONE_ADDR = 256
TILE_BASE = 4096
STAGING_BASE = TILE_BASE + 4 * SLOT_BYTES
STAGING_BYTES = 1 << 20
SCRATCH_BASE = STAGING_BASE + STAGING_BYTES
POOL_BASE = SCRATCH_BASE + SLOT_BYTES
REGISTERS = ("tr0", "tr1", "tr2", "tr3", "acc0", "acc1", "acc2", "acc3")


class Residency(enum.Enum):
    EVEN = 0
    ODD = 1


def ceil8(n: int) -> int:
    return -(-n // 8) * 8


@dataclass(frozen=True)
class TileRegion:
    base: int
    residency: Residency
    rows: int
    cols: int

    def __post_init__(self):
        if not 1 <= self.rows <= ROWNUM:
            raise LayoutError(f"rows must be 1..{ROWNUM}, got {self.rows}")
        if not 1 <= self.cols <= MAX_COLS:
            raise LayoutError(f"cols must be 1..{MAX_COLS}, got {self.cols}")
        if self.base < 0 or self.base % 256:
            raise LayoutError(f"region base {self.base:#x} must be 256-byte aligned")

    @property
    def col_blocks(self) -> int:
        """Columns actually reserved (padded to whole AAM groups of 8)."""
        return ceil8(self.cols)

    @property
    def nbytes(self) -> int:
        return self.col_blocks * BLOCK

    @property
    def end(self) -> int:
        return self.base + self.nbytes

    @property
    def units(self) -> int:
        return -(-self.rows // LANES)

    def bank(self, unit: int) -> int:
        return 2 * unit + self.residency.value

    def banks(self) -> List[int]:
        return [self.bank(u) for u in range(NUM_UNITS)]

    def with_shape(self, rows: int, cols: int) -> "TileRegion":
        return TileRegion(self.base, self.residency, rows, cols)

    def overlaps(self, other: "TileRegion") -> bool:
        return (self.residency is other.residency
                and self.base < other.end and other.base < self.end)

    def same_storage(self, other: "TileRegion") -> bool:
        return self.residency is other.residency and self.base == other.base

    def check_capacity(self, capacity: int) -> None:
        if self.end > capacity:
            raise LayoutError(f"region ends at {self.end:#x}, past bank capacity {capacity:#x}")


def addr_of(region: TileRegion, row: int, col: int):
    """(bank, byte offset) holding element ``(row, col)`` of ``region``."""
    if not 0 <= row < region.rows or not 0 <= col < region.cols:
        raise LayoutError(f"({row}, {col}) outside {region.rows}x{region.cols} region")
    bank = 2 * (row // LANES) + region.residency.value
    return bank, region.base + col * BLOCK + (row % LANES) * 2


def home_region(reg: str, rows: int = ROWNUM, cols: int = MAX_COLS) -> TileRegion:
    if reg not in REGISTERS:
        raise LayoutError(f"unknown register {reg!r}")
    i = int(reg[-1])
    res = Residency.EVEN if reg.startswith("tr") else Residency.ODD
    return TileRegion(TILE_BASE + i * SLOT_BYTES, res, rows, cols)


# --- pack / unpack ----------------------------------------------------------

def _as_bits(matrix) -> np.ndarray:
    m = np.asarray(matrix)
    if m.dtype == np.float16:
        m = m.view(np.uint16)
    if m.dtype != np.uint16:
        raise LayoutError(f"expected uint16 bit patterns or float16, got {m.dtype}")
    if m.ndim != 2:
        raise LayoutError("matrix must be 2-D")
    return m


def pack_commands(matrix, region: TileRegion) -> List[DramCommand]:
    """SB writes that store ``matrix`` into ``region``; padding is written as zero."""
    m = _as_bits(matrix)
    rows, cols = m.shape
    if rows > region.rows or cols > region.cols:
        raise LayoutError(f"{rows}x{cols} matrix does not fit {region.rows}x{region.cols} region")
    padded = np.zeros((ROWNUM, region.col_blocks), dtype="<u2")
    padded[:rows, :cols] = m
    # (unit, col, lane) so each block is contiguous
    blocks = np.ascontiguousarray(padded.reshape(NUM_UNITS, LANES, -1).transpose(0, 2, 1))
    cmds = []
    for u in range(NUM_UNITS):
        bank = region.bank(u)
        raw = blocks[u].tobytes()
        for c in range(region.col_blocks):
            cmds.append(DramCommand.write(region.base + c * BLOCK, raw[c * BLOCK:(c + 1) * BLOCK], bank=bank))
    return cmds


def pack(device: PseudoChannel, matrix, region: TileRegion) -> int:
    region.check_capacity(device.config.bank_capacity)
    cmds = pack_commands(matrix, region)
    for c in cmds:
        device.apply(c)
    return len(cmds)


def unpack(device: PseudoChannel, region: TileRegion) -> np.ndarray:
    """Read ``region`` back as a (rows, cols) uint16 matrix (no commands issued)."""
    region.check_capacity(device.config.bank_capacity)
    banks = device.state.banks[region.residency.value::2]
    lo = region.base // 2
    window = banks[:, lo:lo + region.cols * LANES].reshape(NUM_UNITS, region.cols, LANES)
    full = window.transpose(0, 2, 1).reshape(ROWNUM, region.cols)
    return full[:region.rows].copy()


def stage_scalars(device: PseudoChannel, values, base: int, banks: Iterable[int]) -> int:
    """Write a flat run of halves contiguously starting at ``base`` in each bank."""
    v = np.asarray(values, dtype=np.uint16).ravel()
    nblk = -(-v.size // LANES)
    padded = np.zeros(nblk * LANES, dtype="<u2")
    padded[:v.size] = v
    raw = padded.tobytes()
    n = 0
    for b in banks:
        for i in range(nblk):
            device.apply(DramCommand.write(base + i * BLOCK, raw[i * BLOCK:(i + 1) * BLOCK], bank=b))
            n += 1
    return n


def write_constants(device: PseudoChannel) -> int:
    """Write the zero vector and the -1.0 vector into every bank (AB mode).

    The zero vector holds -0, the exact additive identity: the MAC-PEP splat ``-0 + b``
    returns b bit for bit, including the sign of a zero b.
    """
    n = 0
    neg_zero = struct.pack("<16H", *[fp16.NEG_ZERO] * LANES)
    for off in range(ZERO_ADDR, ZERO_ADDR + ZERO_BYTES, BLOCK):
        device.apply(DramCommand.write(off, neg_zero))
        n += 1
    device.apply(DramCommand.write(MINUS_ONE_ADDR, struct.pack("<16H", *[fp16.NEG_ONE] * LANES)))
    return n + 1


# --- register table -------------------------------------------------------------

class TileRegisterTable:
    """Maps tr0-tr3 / acc0-acc3 to regions.

    Valid entries of equal residency are either disjoint or share the exact
    same storage (an alias left by a pointer move); partial overlap is refused.
    """

    def __init__(self, entries: Optional[Dict[str, Optional[TileRegion]]] = None):
        self.entries: Dict[str, Optional[TileRegion]] = {r: None for r in REGISTERS}
        if entries:
            for k, v in entries.items():
                self._check_name(k)
                self.entries[k] = v

    @staticmethod
    def _check_name(reg):
        if reg not in REGISTERS:
            raise LayoutError(f"unknown register {reg!r}")

    def copy(self) -> "TileRegisterTable":
        return TileRegisterTable(dict(self.entries))

    def valid(self, reg: str) -> bool:
        self._check_name(reg)
        return self.entries[reg] is not None

    def get(self, reg: str) -> TileRegion:
        self._check_name(reg)
        region = self.entries[reg]
        if region is None:
            raise LayoutError(f"{reg} holds no valid tile")
        return region

    def remap(self, reg: str, region: TileRegion) -> None:
        self._check_name(reg)
        for other, r in self.entries.items():
            if other == reg or r is None:
                continue
            if r.overlaps(region) and not r.same_storage(region):
                raise LayoutError(f"{reg} region overlaps {other}")
        self.entries[reg] = region

    def invalidate(self, reg: Optional[str] = None) -> None:
        if reg is None:
            self.entries = {r: None for r in REGISTERS}
        else:
            self._check_name(reg)
            self.entries[reg] = None

    def shared(self, reg: str) -> bool:
        """True when another valid register aliases this register's storage."""
        region = self.entries[reg]
        return region is not None and any(
            r is not None and o != reg and r.same_storage(region) for o, r in self.entries.items())

    def in_use(self, residency: Residency, base: int, nbytes: int = SLOT_BYTES, exclude=()) -> bool:
        probe_end = base + nbytes
        for reg, r in self.entries.items():
            if r is None or reg in exclude or r.residency is not residency:
                continue
            if r.base < probe_end and base < r.end:
                return True
        return False

    def fresh(self, residency: Residency, capacity: int, prefer: Optional[int] = None,
              exclude=()) -> int:
        """Base of an unused full-size slot (home slots first, then the pool)."""
        candidates = [TILE_BASE + i * SLOT_BYTES for i in range(4)]
        if prefer is not None:
            candidates.insert(0, prefer)
        base = POOL_BASE
        while base + SLOT_BYTES <= capacity:
            candidates.append(base)
            base += SLOT_BYTES
        for b in candidates:
            if not self.in_use(residency, b, exclude=exclude):
                return b
        raise LayoutError(f"no free {residency.name.lower()}-bank slot left")


@dataclass(frozen=True)
class BlockCopy:
    src_bank: int
    src_addr: int
    dst_bank: int
    dst_addr: int


@dataclass
class RelocationPlan:
    reg: str
    source: TileRegion
    target: TileRegion
    copies: List[BlockCopy] = field(default_factory=list)

    @property
    def commands(self) -> int:
        return 2 * len(self.copies)  # one SB read and one SB write per block


def relocate(table: TileRegisterTable, reg: str, target: Residency, capacity: int) -> RelocationPlan:
    """Plan copying ``reg`` to a fresh region of ``target`` residency and point ``reg`` at it.

    ``ceil(rows/16) x ceil8(cols)`` blocks are copied; a same-residency request
    returns an empty plan.
    """
    src = table.get(reg)
    if src.residency is target:
        return RelocationPlan(reg, src, src)
    home = home_region(reg)
    base = table.fresh(target, capacity, prefer=home.base, exclude=(reg,))
    dst = TileRegion(base, target, src.rows, src.cols)
    dst.check_capacity(capacity)
    copies = [BlockCopy(src.bank(u), src.base + c * BLOCK, dst.bank(u), dst.base + c * BLOCK)
              for u in range(src.units) for c in range(src.col_blocks)]
    table.remap(reg, dst)
    return RelocationPlan(reg, src, dst, copies)


def execute_relocation(device: PseudoChannel, plan: RelocationPlan) -> int:
    for cp in plan.copies:
        data = device.apply(DramCommand.read(cp.src_addr, bank=cp.src_bank)).data
        device.apply(DramCommand.write(cp.dst_addr, data, bank=cp.dst_bank))
    return plan.commands


# --- matrix files -----------------------------------------------------------------

MATRIX_MAGIC = b"AMEM16\0"


def write_matrix(path, matrix) -> None:
    m = _as_bits(matrix)
    with open(path, "wb") as f:
        f.write(MATRIX_MAGIC + struct.pack("<II", *m.shape))
        f.write(m.astype("<u2").tobytes())


def read_matrix(path) -> np.ndarray:
    """Load an AMEM16 file, or a CSV of decimal floats rounded to binary16."""
    with open(path, "rb") as f:
        data = f.read()
    if data.startswith(MATRIX_MAGIC):
        hdr = len(MATRIX_MAGIC)
        rows, cols = struct.unpack_from("<II", data, hdr)
        payload = data[hdr + 8:]
        if len(payload) != 2 * rows * cols:
            raise LayoutError(f"{path}: payload size does not match {rows}x{cols}")
        return np.frombuffer(payload, dtype="<u2").reshape(rows, cols).astype(np.uint16)
    rows = [r for r in csv.reader(data.decode("utf-8").splitlines()) if r]
    if not rows or len({len(r) for r in rows}) != 1:
        raise LayoutError(f"{path}: not an AMEM16 file or rectangular CSV")
    return np.array([[fp16.f32_to_f16(float(x)).bits for x in r] for r in rows], dtype=np.uint16)
