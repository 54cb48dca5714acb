"""PEP microkernels and the AB_PIM command schedules that drive them.

Every loop body is written with aam entries, so one CRF entry consumes eight
consecutive commands whose addresses step by 32 bytes (or 2 bytes for scalar
fills).  Per-iteration command counts: ADD/MUL 24, SUB 32 (plus 8 setup
fills of SRF_M), MAC 26.

MAC runs cover ``n_cols x k_chunks`` iterations in n-major, k-minor order:
iteration ``(n, c)`` reloads accumulator column ``n`` from ``ba0 + 32n``,
broadcasts B scalars ``8c..8c+7`` of column ``n`` from
``bt1 + n*b_col_stride + 16c``, splats them against the zero vector and
accumulates A's column blocks at ``bt0 + 256c``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional

from . import isa
from .device import BLOCK, CmdKind, CommandTrace, DramCommand, Mode, TraceEntry
from .errors import ScheduleError
from .isa import EVEN_BANK, ODD_BANK, Opcode, PepKind, PepProgram, PimInstruction
from .layout import MINUS_ONE_ADDR, TILE_BASE, ZERO_ADDR

MAX_ITERATIONS = 256
K_PER_ITER = 8
ELEMS_PER_ITER = 128 * 8
GROUP_BYTES = 8 * BLOCK  # one aam group of eight column blocks

BODY_COMMANDS = {PepKind.ADD_PEP: 24, PepKind.MUL_PEP: 24, PepKind.SUB_PEP: 32, PepKind.MAC_PEP: 26}
SETUP_COMMANDS = {PepKind.ADD_PEP: 0, PepKind.MUL_PEP: 0, PepKind.SUB_PEP: 8, PepKind.MAC_PEP: 0}


def expected_commands(kind: PepKind, iterations: int) -> int:
    return SETUP_COMMANDS[kind] + BODY_COMMANDS[kind] * iterations


@dataclass(frozen=True)
class MacShape:
    n_cols: int
    k_chunks: int
    k_per_iter: int = K_PER_ITER

    def __post_init__(self):
        if self.n_cols < 1 or self.k_chunks < 1:
            raise ScheduleError("MAC shape needs at least one column and one k chunk")
        if self.k_per_iter != K_PER_ITER:
            raise ScheduleError("MAC-PEP consumes exactly 8 scalars per iteration")
        if self.iterations > MAX_ITERATIONS:
            raise ScheduleError(f"{self.n_cols}x{self.k_chunks} = {self.iterations} iterations > {MAX_ITERATIONS}")

    @property
    def iterations(self) -> int:
        return self.n_cols * self.k_chunks


@dataclass
class CommandSchedule:
    kind: PepKind
    iterations: int
    slots: List[int]
    addrs: List[int]
    setup_commands: int = 0

    def __len__(self):
        return len(self.addrs)

    @property
    def data_commands(self) -> int:
        return len(self.addrs)

    def pairs(self):
        return zip(self.slots, self.addrs)

    def to_trace(self, program: PepProgram) -> CommandTrace:
        """Schedule as AB_PIM trace lines (annotations left for the device to fill)."""
        writes = {i for i, ins in enumerate(program.crf_image) if ins.writes_bank}
        tr = CommandTrace()
        for slot, addr in self.pairs():
            kind = CmdKind.COL_WRITE if slot in writes else CmdKind.COL_READ
            tr.append(TraceEntry(Mode.AB_PIM, DramCommand(kind, addr=addr)))
        return tr


@dataclass
class PepRun:
    program: PepProgram
    schedule: CommandSchedule

    def __iter__(self):
        return iter((self.program, self.schedule))

    @property
    def kind(self) -> PepKind:
        return self.program.kind

    @property
    def iterations(self) -> int:
        return self.schedule.iterations

    @property
    def flops(self) -> int:
        return self.program.flops


def _check_iterations(iterations: int) -> None:
    if not 1 <= iterations <= MAX_ITERATIONS:
        raise ScheduleError(f"iterations must be 1..{MAX_ITERATIONS}, got {iterations}")


def _check_bases(*bases) -> None:
    for b in bases:
        if b < 0 or b % GROUP_BYTES:
            raise ScheduleError(f"base {b:#x} must be 256-byte aligned")


def _check_writes(addrs, capacity: Optional[int], span: int) -> None:
    lo = min(addrs)
    if lo < TILE_BASE:
        raise ScheduleError(f"schedule writes into the reserved constant region at {lo:#x}")
    if capacity is not None and max(addrs) + span > capacity:
        raise ScheduleError("schedule runs past bank capacity")


@lru_cache(maxsize=None)
def _elementwise_program(kind: PepKind, iterations: int) -> PepProgram:
    op = Opcode.ADD if kind is PepKind.ADD_PEP else Opcode.MUL
    body = [
        PimInstruction(Opcode.FILL, isa.grf_a(), EVEN_BANK),
        PimInstruction(op, isa.grf_b(), EVEN_BANK, isa.grf_a()),
        PimInstruction(Opcode.MOV, ODD_BANK, isa.grf_b()),
    ]
    return isa.make_program(body + [isa.jump(-3, iterations - 1), isa.EXIT], kind, ELEMS_PER_ITER * iterations)


def _elementwise(kind, bt0, bt1, ba0, iterations, capacity):
    _check_iterations(iterations)
    _check_bases(bt0, bt1, ba0)
    slots, addrs = [], []
    for j in range(iterations):
        off = GROUP_BYTES * j
        for slot, base in ((0, bt0), (1, bt1), (2, ba0)):
            slots += [slot] * 8
            addrs += range(base + off, base + off + GROUP_BYTES, BLOCK)
    _check_writes([ba0], capacity, GROUP_BYTES * iterations)
    for b in (bt0, bt1):
        if capacity is not None and b + GROUP_BYTES * iterations > capacity:
            raise ScheduleError("source region runs past bank capacity")
    return PepRun(_elementwise_program(kind, iterations), CommandSchedule(kind, iterations, slots, addrs))


def build_add_pep(bt0: int, bt1: int, ba0: int, iterations: int, capacity: Optional[int] = None) -> PepRun:
    """odd[ba0..] = even[bt0..] + even[bt1..] over ``iterations`` groups of 8 column blocks."""
    return _elementwise(PepKind.ADD_PEP, bt0, bt1, ba0, iterations, capacity)


def build_mul_pep(bt0: int, bt1: int, ba0: int, iterations: int, capacity: Optional[int] = None) -> PepRun:
    return _elementwise(PepKind.MUL_PEP, bt0, bt1, ba0, iterations, capacity)


@lru_cache(maxsize=None)
def _sub_program(iterations: int) -> PepProgram:
    instrs = [
        PimInstruction(Opcode.FILL, isa.srf_m(), EVEN_BANK),
        PimInstruction(Opcode.FILL, isa.grf_a(), EVEN_BANK),
        PimInstruction(Opcode.MUL, isa.grf_b(), EVEN_BANK, isa.srf_m()),
        PimInstruction(Opcode.ADD, isa.grf_b(), isa.grf_a(), isa.grf_b()),
        PimInstruction(Opcode.MOV, ODD_BANK, isa.grf_b()),
        isa.jump(-4, iterations - 1),
        isa.EXIT,
    ]
    return isa.make_program(instrs, PepKind.SUB_PEP, ELEMS_PER_ITER * iterations)


def build_sub_pep(bt0: int, bt1: int, ba0: int, iterations: int, minus_one_addr: int = MINUS_ONE_ADDR,
                  capacity: Optional[int] = None) -> PepRun:
    """odd[ba0..] = even[bt0..] + (-1 * even[bt1..])."""
    _check_iterations(iterations)
    _check_bases(bt0, bt1, ba0)
    if minus_one_addr is None or minus_one_addr % 16:
        raise ScheduleError("SUB-PEP needs a 16-byte aligned -1.0 constant region")
    slots = [0] * 8
    addrs = list(range(minus_one_addr, minus_one_addr + 16, 2))
    for j in range(iterations):
        off = GROUP_BYTES * j
        for slot, base in ((1, bt0), (2, bt1), (3, bt0), (4, ba0)):
            slots += [slot] * 8
            addrs += range(base + off, base + off + GROUP_BYTES, BLOCK)
    _check_writes([ba0], capacity, GROUP_BYTES * iterations)
    return PepRun(_sub_program(iterations), CommandSchedule(PepKind.SUB_PEP, iterations, slots, addrs, 8))


@lru_cache(maxsize=None)
def _mac_program(iterations: int) -> PepProgram:
    instrs = [
        PimInstruction(Opcode.FILL, isa.grf_b(0), ODD_BANK),
        PimInstruction(Opcode.FILL, isa.srf_a(), EVEN_BANK, broadcast=True),
        PimInstruction(Opcode.ADD, isa.grf_a(), EVEN_BANK, isa.srf_a()),
        PimInstruction(Opcode.MAC, isa.grf_b(0), EVEN_BANK, isa.grf_a()),
        PimInstruction(Opcode.MOV, ODD_BANK, isa.grf_b(0)),
        isa.jump(-5, iterations - 1),
        isa.EXIT,
    ]
    return isa.make_program(instrs, PepKind.MAC_PEP, 2 * ELEMS_PER_ITER * iterations)


def build_mac_pep(bt0: int, bt1: int, ba0: int, shape: MacShape, b_col_stride: Optional[int] = None,
                  zero_addr: int = ZERO_ADDR, capacity: Optional[int] = None) -> PepRun:
    """acc[:, n] += A[:, 8c:8c+8] @ B[8c:8c+8, n] for every (n, c) of ``shape``.

    ``bt0``: A (even banks, column-major, 256-aligned); ``bt1``: B scalars of
    column 0, 16-byte aligned, column ``n`` at ``bt1 + n*b_col_stride``;
    ``ba0``: accumulator column 0 (odd banks).
    """
    if b_col_stride is None:
        b_col_stride = 16 * shape.k_chunks
    _check_bases(bt0, zero_addr)
    if bt1 % 16 or b_col_stride % 16 or ba0 % BLOCK:
        raise ScheduleError("B scalars need 16-byte alignment and accumulator 32-byte alignment")
    if b_col_stride < 16 * shape.k_chunks:
        raise ScheduleError("B column stride shorter than the k extent")
    zero = list(range(zero_addr, zero_addr + GROUP_BYTES, BLOCK))
    slots, addrs = [], []
    body_slots = [0] + [1] * 8 + [2] * 8 + [3] * 8 + [4]
    for n in range(shape.n_cols):
        acc = ba0 + BLOCK * n
        bcol = bt1 + b_col_stride * n
        for c in range(shape.k_chunks):
            a = bt0 + GROUP_BYTES * c
            b = bcol + 16 * c
            slots += body_slots
            addrs.append(acc)
            addrs += range(b, b + 16, 2)
            addrs += zero
            addrs += range(a, a + GROUP_BYTES, BLOCK)
            addrs.append(acc)
    _check_writes([ba0], capacity, BLOCK * shape.n_cols)
    return PepRun(_mac_program(shape.iterations), CommandSchedule(PepKind.MAC_PEP, shape.iterations, slots, addrs))


def build(kind: PepKind, bt0: int, bt1: int, ba0: int, iterations: int, **kw) -> PepRun:
    if kind is PepKind.ADD_PEP:
        return build_add_pep(bt0, bt1, ba0, iterations, **kw)
    if kind is PepKind.MUL_PEP:
        return build_mul_pep(bt0, bt1, ba0, iterations, **kw)
    if kind is PepKind.SUB_PEP:
        return build_sub_pep(bt0, bt1, ba0, iterations, **kw)
    raise ScheduleError("use build_mac_pep for MAC runs")
