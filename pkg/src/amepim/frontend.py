"""AME architectural state and lowering of AME instructions onto PEP runs.

Register conventions:

* ``tr0``-``tr3`` hold ``rows x K`` tiles (``rows`` is M for the first
  ``mfmacc`` source; the second source is ``N x K``, loaded with ``mld.t``
  from a ``K x N`` host matrix).
* ``acc0``-``acc3`` hold ``M x N`` tiles.
* Element-wise ops work on ``M x N`` when the destination is an accumulator
  and on ``M x K`` when it is a tile register.

Sources are read from even banks and results land in odd banks, so
operands on the wrong side are copied first (relocation, charged at one
cycle per command).  Host-side staging (loads, the B scalar layout for
``mfmacc``, row broadcasts, zero-initialised accumulators) is counted but
not charged.
"""

from __future__ import annotations

import re
import shlex
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import fp16, layout as L
from .device import BLOCK, DramCommand, Mode, PseudoChannel
from .errors import AmeError, ParseError, UnsupportedInstruction
from .layout import Residency, TileRegion, TileRegisterTable
from .pep import MAX_ITERATIONS, GROUP_BYTES, MacShape, PepRun, build_add_pep, build_mac_pep, \
    build_mul_pep, build_sub_pep

LIMITS = {"m": L.ROWNUM, "k": L.MAX_COLS, "n": L.MAX_COLS}

NOT_SUPPORTED = "Not supported: no PIM instruction implements this operation"
UNSUPPORTED = {
    "mfmax.h.mm": NOT_SUPPORTED + " (max)",
    "mfmax.h.mv.i": NOT_SUPPORTED + " (max)",
    "mfmin.h.mm": NOT_SUPPORTED + " (min)",
    "mfmin.h.mv.i": NOT_SUPPORTED + " (min)",
    "mfwmacc.h": NOT_SUPPORTED + " (widening accumulation)",
    "mfmacc.s.h": NOT_SUPPORTED + " (widening accumulation)",
}
ELTWISE = {
    "mfadd.h.mm": "add", "mfadd.h.mv.i": "add",
    "mfsub.h.mm": "sub", "mfsub.h.mv.i": "sub",
    "mfmul.h.mm": "mul", "mfmul.h.mv.i": "mul",
}
_ARITY = {
    "msettilem": 1, "msettilek": 1, "msettilen": 1, "msettilemi": 1, "msettileki": 1, "msettileni": 1,
    "mrelease": 0, "mld": 2, "mld.t": 2, "mst": 2, "mst.t": 2, "mmov": 2, "mmov.mv.i": 3,
    "mfmacc.h": 3,
}
_ARITY.update({m: (4 if m.endswith(".mv.i") else 3) for m in list(ELTWISE) + list(UNSUPPORTED)})
_REG_RE = re.compile(r"^(tr[0-3]|acc[0-3])$")


@dataclass(frozen=True)
class AmeInstruction:
    mnemonic: str
    operands: Tuple = ()
    line: Optional[int] = None

    def __str__(self):
        return self.mnemonic + (" " + ", ".join(str(o) for o in self.operands) if self.operands else "")


def parse_instruction(text: str, line: Optional[int] = None) -> Optional[AmeInstruction]:
    body = text.split("#", 1)[0].strip()
    if not body:
        return None
    parts = body.split(None, 1)
    mnem = parts[0].lower()
    if mnem not in _ARITY:
        raise ParseError(f"unknown AME instruction {parts[0]!r}", line)
    rest = parts[1] if len(parts) > 1 else ""
    try:
        raw = shlex.split(rest.replace(",", " "))
    except ValueError as exc:
        raise ParseError(str(exc), line) from None
    if len(raw) != _ARITY[mnem]:
        raise ParseError(f"{mnem} takes {_ARITY[mnem]} operands, got {len(raw)}", line)
    ops = []
    for k, tok in enumerate(raw):
        is_path = mnem.startswith(("mld", "mst")) and k == 1
        if is_path:
            ops.append(tok)
        elif _REG_RE.match(tok):
            ops.append(tok)
        elif re.fullmatch(r"[+-]?(0x[0-9a-fA-F]+|\d+)", tok):
            ops.append(int(tok, 0))
        else:
            raise ParseError(f"bad operand {tok!r}", line)
    return AmeInstruction(mnem, tuple(ops), line)


def parse_program(text: str) -> List[AmeInstruction]:
    out = []
    for n, raw in enumerate(text.splitlines(), 1):
        ins = parse_instruction(raw, n)
        if ins is not None:
            out.append(ins)
    return out


# --- plan steps ----------------------------------------------------------------

@dataclass
class SetMode:
    mode: Mode


@dataclass
class LoadCrf:
    run: PepRun


@dataclass
class PepStep:
    run: PepRun


@dataclass
class RelocateStep:
    plan: L.RelocationPlan


@dataclass
class StageWrites:
    """Precomputed SB writes (zero fill, loads)."""
    label: str
    commands: list

    @property
    def count(self):
        return len(self.commands)


@dataclass
class StageB:
    """Gather an ``N x K`` tile into per-column contiguous scalars."""
    source: TileRegion
    base: int
    stride: int
    banks: tuple

    @property
    def count(self):
        reads = self.source.units * self.source.col_blocks
        writes = self.source.rows * (self.stride // BLOCK) * len(self.banks)
        return reads + writes


@dataclass
class StageRow:
    """Replicate one row of ``source`` over all rows of ``target``."""
    source: TileRegion
    row: int
    target: TileRegion

    @property
    def count(self):
        return self.source.units * self.source.col_blocks + L.NUM_UNITS * self.target.col_blocks


@dataclass
class TableUpdate:
    reg: str
    region: Optional[TileRegion]


@dataclass
class ExecutionPlan:
    instr: Optional[AmeInstruction]
    steps: list = field(default_factory=list)
    flops: int = 0
    table_before: Optional[dict] = None
    table_after: Optional[TileRegisterTable] = None

    def pep_runs(self) -> List[PepRun]:
        return [s.run for s in self.steps if isinstance(s, PepStep)]

    def relocation_commands(self) -> int:
        return sum(s.plan.commands for s in self.steps if isinstance(s, RelocateStep))

    def staging_commands(self) -> int:
        return sum(s.count for s in self.steps if isinstance(s, (StageWrites, StageB, StageRow)))


# --- state -------------------------------------------------------------------------

@dataclass
class AmeState:
    csr: Dict[str, Optional[int]] = field(default_factory=lambda: {"m": None, "k": None, "n": None})
    table: TileRegisterTable = field(default_factory=TileRegisterTable)
    released: bool = False

    def dim(self, name: str) -> int:
        v = self.csr[name]
        if v is None:
            raise AmeError(f"mtile{name} is not configured")
        return v


class Frontend:
    """One AME context bound to one pseudo-channel."""

    def __init__(self, device: Optional[PseudoChannel] = None, state: Optional[AmeState] = None):
        self.device = device or PseudoChannel()
        self.state = state or AmeState()
        self.capacity = self.device.config.bank_capacity
        if L.POOL_BASE > self.capacity:
            raise AmeError("bank capacity too small for the tile map")
        self._to(Mode.AB)
        L.write_constants(self.device)
        self._to(Mode.SB)

    def _to(self, mode: Mode):
        if self.device.mode is not mode:
            self.device.set_mode(mode)

    # --- configuration / lifecycle --------------------------------------------

    def configure(self, which: str, value: int) -> None:
        which = which.lower()
        if which not in LIMITS:
            raise AmeError(f"unknown tile dimension {which!r}")
        if not isinstance(value, int) or not 1 <= value <= LIMITS[which]:
            raise AmeError(f"mtile{which} must be 1..{LIMITS[which]}, got {value}")
        self.state.csr[which] = value
        self.state.released = False

    def mrelease(self) -> None:
        self.state.table.invalidate()
        self.state.released = True

    def _live(self):
        if self.state.released:
            raise AmeError("AME state released; reconfigure before use")

    # --- loads / stores ----------------------------------------------------------

    def _tile_ok(self, reg: str, rows: int, cols: int):
        m, k, n = (self.state.dim(x) for x in "mkn")
        if reg.startswith("acc"):
            if (rows, cols) != (m, n):
                raise AmeError(f"{reg} expects {m}x{n}, got {rows}x{cols}")
        elif cols != k or rows not in (m, n):
            raise AmeError(f"{reg} expects {m}x{k} (or {n}x{k} for a transposed operand), got {rows}x{cols}")

    def plan_load(self, reg: str, matrix, transpose: bool = False) -> ExecutionPlan:
        self._live()
        bits = L._as_bits(matrix)
        if transpose:
            bits = np.ascontiguousarray(bits.T)
        rows, cols = bits.shape
        self._tile_ok(reg, rows, cols)
        table = self.state.table.copy()
        res = Residency.EVEN if reg.startswith("tr") else Residency.ODD
        region = self._dst_region(table, reg, res, rows, cols)
        plan = ExecutionPlan(AmeInstruction("mld.t" if transpose else "mld", (reg,)),
                             table_before=dict(self.state.table.entries))
        plan.steps = [SetMode(Mode.SB), StageWrites(f"load {reg}", L.pack_commands(bits, region)),
                      TableUpdate(reg, region)]
        table.remap(reg, region)
        plan.table_after = table
        return plan

    def mld(self, reg: str, matrix, transpose: bool = False) -> ExecutionPlan:
        plan = self.plan_load(reg, matrix, transpose)
        self.execute(plan)
        return plan

    def mst(self, reg: str, transpose: bool = False) -> np.ndarray:
        self._live()
        region = self.state.table.get(reg)
        out = L.unpack(self.device, region)
        return np.ascontiguousarray(out.T) if transpose else out

    # --- planning -------------------------------------------------------------------

    def _dst_region(self, table: TileRegisterTable, reg: str, res: Residency, rows: int, cols: int) -> TileRegion:
        """Storage for a fully rewritten destination: reuse unless shared or misplaced."""
        cur = table.entries[reg]
        if cur is not None and cur.residency is res and not table.shared(reg):
            return TileRegion(cur.base, res, rows, cols)
        base = table.fresh(res, self.capacity, prefer=L.home_region(reg).base, exclude=(reg,))
        return TileRegion(base, res, rows, cols)

    def _relocate(self, table, steps, reg, res):
        rp = L.relocate(table, reg, res, self.capacity)
        if rp.copies:
            steps.append(SetMode(Mode.SB))
            steps.append(RelocateStep(rp))
        return table.get(reg)

    def _unshare(self, table, steps, reg):
        """Give ``reg`` a private copy of its storage before an in-place update."""
        src = table.get(reg)
        base = table.fresh(src.residency, self.capacity, prefer=L.home_region(reg).base, exclude=(reg,))
        dst = TileRegion(base, src.residency, src.rows, src.cols)
        copies = [L.BlockCopy(src.bank(u), src.base + c * BLOCK, dst.bank(u), dst.base + c * BLOCK)
                  for u in range(src.units) for c in range(src.col_blocks)]
        table.remap(reg, dst)
        steps.append(SetMode(Mode.SB))
        steps.append(RelocateStep(L.RelocationPlan(reg, src, dst, copies)))
        return dst

    @staticmethod
    def _run_steps(run: PepRun):
        return [SetMode(Mode.AB), LoadCrf(run), SetMode(Mode.AB_PIM), PepStep(run)]

    def _source(self, table, steps, reg, rows, cols, what):
        region = table.get(reg)
        if (region.rows, region.cols) != (rows, cols):
            raise AmeError(f"{what} {reg} is {region.rows}x{region.cols}, expected {rows}x{cols}")
        if region.residency is not Residency.EVEN:
            region = self._relocate(table, steps, reg, Residency.EVEN)
        return region

    def plan(self, instr: AmeInstruction) -> ExecutionPlan:
        m = instr.mnemonic
        if m in UNSUPPORTED:
            raise UnsupportedInstruction(m, UNSUPPORTED[m])
        self._live()
        table = self.state.table.copy()
        plan = ExecutionPlan(instr, table_before=dict(self.state.table.entries))
        steps = plan.steps
        if m in ELTWISE:
            self._plan_eltwise(instr, table, plan)
        elif m == "mfmacc.h":
            self._plan_mfmacc(instr, table, plan)
        elif m == "mmov":
            dst, src = instr.operands
            table.remap(dst, table.get(src))
            steps.append(TableUpdate(dst, table.entries[dst]))
        elif m == "mmov.mv.i":
            dst, src, row = instr.operands
            source = table.get(src)
            if not 0 <= row < source.rows:
                raise AmeError(f"row {row} outside {src}")
            res = Residency.EVEN if dst.startswith("tr") else Residency.ODD
            target = self._dst_region(table, dst, res, source.rows, source.cols)
            if target.overlaps(source):
                target = TileRegion(table.fresh(res, self.capacity, exclude=(dst, src)), res, source.rows, source.cols)
            steps += [SetMode(Mode.SB), StageRow(source, row, target), TableUpdate(dst, target)]
            table.remap(dst, target)
        else:
            raise AmeError(f"{m} is not an arithmetic or move instruction; use the dedicated API")
        if not steps or not isinstance(steps[-1], SetMode) or steps[-1].mode is not Mode.SB:
            steps.append(SetMode(Mode.SB))
        plan.table_after = table
        return plan

    def _plan_eltwise(self, instr, table, plan):
        op = ELTWISE[instr.mnemonic]
        mv = instr.mnemonic.endswith(".mv.i")
        dst, s1, s2 = instr.operands[:3]
        M = self.state.dim("m")
        C = self.state.dim("n") if dst.startswith("acc") else self.state.dim("k")
        steps = plan.steps
        a = self._source(table, steps, s1, M, C, "source")
        if mv:
            row = instr.operands[3]
            src2 = table.get(s2)
            if src2.cols != C or not 0 <= row < src2.rows:
                raise AmeError(f"row {row} of {s2} ({src2.rows}x{src2.cols}) cannot broadcast over {M}x{C}")
            b = TileRegion(L.SCRATCH_BASE, Residency.EVEN, M, C)
            steps += [SetMode(Mode.SB), StageRow(src2, row, b)]
        else:
            b = self._source(table, steps, s2, M, C, "source")
        out = self._dst_region(table, dst, Residency.ODD, M, C)
        groups = L.ceil8(C) // 8
        for r0 in range(0, groups, MAX_ITERATIONS):
            it = min(MAX_ITERATIONS, groups - r0)
            off = r0 * GROUP_BYTES
            args = (a.base + off, b.base + off, out.base + off, it)
            if op == "add":
                run = build_add_pep(*args, capacity=self.capacity)
            elif op == "mul":
                run = build_mul_pep(*args, capacity=self.capacity)
            else:
                run = build_sub_pep(*args, minus_one_addr=L.MINUS_ONE_ADDR, capacity=self.capacity)
            steps += self._run_steps(run)
        table.remap(dst, out)
        steps.append(TableUpdate(dst, out))
        plan.flops = M * C

    def _plan_mfmacc(self, instr, table, plan):
        dst, s1, s2 = instr.operands
        if not dst.startswith("acc") or not s1.startswith("tr") or not s2.startswith("tr"):
            raise AmeError("mfmacc.h expects accN, trA, trB")
        M, K, N = (self.state.dim(x) for x in "mkn")
        if N > L.ROWNUM:
            raise AmeError(f"mfmacc.h needs mtilen <= {L.ROWNUM}: the second source tile holds N rows")
        steps = plan.steps
        a = self._source(table, steps, s1, M, K, "first source")
        bt = table.get(s2)
        if (bt.rows, bt.cols) != (N, K):
            raise AmeError(f"second source {s2} is {bt.rows}x{bt.cols}, expected {N}x{K} (load it with mld.t)")
        stride = -(-2 * L.ceil8(K) // BLOCK) * BLOCK
        if stride * N > L.STAGING_BYTES:
            raise AmeError("B operand does not fit the scalar staging area")
        banks = (0,) if self.device.config.broadcast_source == "bank0" else tuple(range(0, 16, 2))
        steps += [SetMode(Mode.SB), StageB(bt, L.STAGING_BASE, stride, banks)]
        # accumulator: odd-resident, private, zero-filled when not yet valid
        cur = table.entries[dst]
        if cur is None:
            acc = self._dst_region(table, dst, Residency.ODD, M, N)
            steps.append(StageWrites(f"zero {dst}", L.pack_commands(np.zeros((M, N), np.uint16), acc)))
            table.remap(dst, acc)
            steps.append(TableUpdate(dst, acc))
        else:
            if (cur.rows, cur.cols) != (M, N):
                raise AmeError(f"accumulator {dst} is {cur.rows}x{cur.cols}, expected {M}x{N}")
            if cur.residency is not Residency.ODD:
                self._relocate(table, steps, dst, Residency.ODD)
            elif table.shared(dst):
                self._unshare(table, steps, dst)
            acc = table.get(dst)
        for shape, n0, c0 in mac_runs(K, N):
            run = build_mac_pep(a.base + GROUP_BYTES * c0, L.STAGING_BASE + stride * n0 + 16 * c0,
                                acc.base + BLOCK * n0, shape, b_col_stride=stride, capacity=self.capacity)
            steps += self._run_steps(run)
        plan.flops = 2 * M * K * N

    # --- execution --------------------------------------------------------------------

    def execute(self, plan: ExecutionPlan) -> ExecutionPlan:
        if plan.table_before is not None and plan.table_before != self.state.table.entries:
            raise AmeError("plan was built against a different register table")
        dev = self.device
        for step in plan.steps:
            if isinstance(step, SetMode):
                self._to(step.mode)
            elif isinstance(step, LoadCrf):
                dev.load_crf(step.run.program)
            elif isinstance(step, PepStep):
                dev.run_schedule(step.run.schedule.pairs())
            elif isinstance(step, RelocateStep):
                L.execute_relocation(dev, step.plan)
            elif isinstance(step, StageWrites):
                for c in step.commands:
                    dev.apply(c)
            elif isinstance(step, StageB):
                self._stage_b(step)
            elif isinstance(step, StageRow):
                self._stage_row(step)
            elif isinstance(step, TableUpdate):
                pass  # applied wholesale below
            else:
                raise AmeError(f"unknown plan step {step!r}")
        if plan.table_after is not None:
            self.state.table = plan.table_after.copy()
        return plan

    def _read_tile(self, region: TileRegion) -> np.ndarray:
        """Read a tile with SB column reads (so staging shows up in traces)."""
        cols = region.col_blocks
        blocks = np.zeros((L.NUM_UNITS, cols, 16), np.uint16)
        for u in range(region.units):
            for c in range(cols):
                data = self.device.apply(DramCommand.read(region.base + c * BLOCK, bank=region.bank(u))).data
                blocks[u, c] = np.frombuffer(data, "<u2")
        full = blocks.transpose(0, 2, 1).reshape(-1, cols)
        return full[:region.rows, :region.cols]

    def _stage_b(self, step: StageB):
        bt = self._read_tile(step.source)          # N x K, row n is column n of B
        n, k = bt.shape
        per_col = step.stride // 2
        # pad with -0: the padded products are then -0 and leave every accumulator unchanged
        flat = np.full((n, per_col), fp16.NEG_ZERO, np.uint16)
        flat[:, :k] = bt
        L.stage_scalars(self.device, flat.ravel(), step.base, step.banks)

    def _stage_row(self, step: StageRow):
        src = self._read_tile(step.source)
        rows = np.repeat(src[step.row:step.row + 1], step.target.rows, axis=0)
        L.pack(self.device, rows, step.target)

    # --- instruction-level entry points ----------------------------------------------

    def run(self, instr: AmeInstruction) -> ExecutionPlan:
        return self.execute(self.plan(instr))


def mac_runs(K: int, N: int):
    """Split an ``mfmacc`` into MAC-PEP runs: yields (MacShape, first column, first k chunk)."""
    kc = L.ceil8(K) // 8
    if kc >= MAX_ITERATIONS:
        for n in range(N):
            for c0 in range(0, kc, MAX_ITERATIONS):
                yield MacShape(1, min(MAX_ITERATIONS, kc - c0)), n, c0
    else:
        per = MAX_ITERATIONS // kc
        for n0 in range(0, N, per):
            yield MacShape(min(per, N - n0), kc), n0, 0
