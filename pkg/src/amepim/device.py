"""Functional model of one HBM-PIM pseudo-channel.

Sixteen banks share eight PIM units; unit ``u`` is wired to even bank ``2u``
and odd bank ``2u+1``.  Bank storage is addressed by a flat per-bank byte
offset (row activation carries no functional effect here).

Command semantics by mode:

* ``SB``: column commands carry a bank and touch that bank only.
* ``AB``: a column write lands in every bank at the same offset.  Writes to
  ``CRF_BASE + 32*j`` program CRF entries ``8j..8j+7`` of every unit; a write
  to block 0 starts a new program (entries 8..31 become NOP, the program
  counter resets).
* ``AB_PIM``: each column command executes the CRF entry at the shared
  program counter in all units.  Address-aligned (aam) register indices come
  from the command address: ``(addr // 32) % 8`` for vector transfers and
  ``(addr // 2) % 8`` for scalar fills into an SRF.  An aam entry is
  executed eight times before the program counter moves on; other entries
  once.  JUMP and EXIT never consume a command.

MOV into a bank must be triggered by a column write; everything else by a
column read.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import fp16
from .errors import DeviceError, EncodingError, RoutingError
from .isa import CRF_ENTRIES, Opcode, OperandKind, PepProgram, PimInstruction, decode

NUM_BANKS = 16
NUM_UNITS = 8
GRF_REGS = 8
SRF_REGS = 8
LANES = fp16.LANES
BLOCK = 32  # bytes per column access (16 halves)
AAM_STEPS = 8
DEFAULT_BANK_CAPACITY = 8 * 1024 * 1024  # 1 Gb per pseudo-channel / 16 banks
CRF_BASE = 0x4000_0000
SNAPSHOT_MAGIC = b"PIMSNAP1"


class Mode(enum.Enum):
    SB = "SB"
    AB = "AB"
    AB_PIM = "AB_PIM"


class CmdKind(enum.Enum):
    MODE_CHANGE = "MODE"
    ACTIVATE = "ACT"
    COL_READ = "RD"
    COL_WRITE = "WR"


@dataclass(frozen=True)
class DramCommand:
    kind: CmdKind
    addr: int = 0
    bank: Optional[int] = None
    row: int = 0
    payload: Optional[bytes] = None
    target: Optional[Mode] = None

    @classmethod
    def read(cls, addr, bank=None):
        return cls(CmdKind.COL_READ, addr=addr, bank=bank)

    @classmethod
    def write(cls, addr, payload=None, bank=None):
        return cls(CmdKind.COL_WRITE, addr=addr, bank=bank,
                   payload=None if payload is None else bytes(payload))

    @classmethod
    def activate(cls, bank, row):
        return cls(CmdKind.ACTIVATE, bank=bank, row=row)

    @classmethod
    def mode_change(cls, target: Mode):
        return cls(CmdKind.MODE_CHANGE, target=target)


@dataclass(frozen=True)
class Annotation:
    """Result of one command: executed CRF entry and aam step, or read data."""

    crf: Optional[int] = None
    aam: Optional[int] = None
    data: Optional[bytes] = None


@dataclass(frozen=True)
class TraceEntry:
    mode: Mode
    command: DramCommand
    crf: Optional[int] = None
    aam: Optional[int] = None

    def to_line(self) -> str:
        c = self.command
        if c.kind is CmdKind.MODE_CHANGE:
            return f"MODE {c.target.value}"
        prefix = {Mode.SB: "SB", Mode.AB: "AB", Mode.AB_PIM: "ABP"}[self.mode]
        parts = [prefix, c.kind.value]
        if c.bank is not None:
            parts.append(f"bank={c.bank}")
        if c.kind is CmdKind.ACTIVATE:
            parts.append(f"row={c.row:#x}")
        else:
            parts.append(f"addr={c.addr:#010x}")
        if c.payload is not None:
            parts.append(f"data={c.payload.hex()}")
        if self.crf is not None:
            parts.append(f"crf={self.crf} aam={self.aam}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "TraceEntry":
        tok = line.split()
        if not tok:
            raise ValueError("empty trace line")
        if tok[0] == "MODE":
            return cls(Mode[tok[1]], DramCommand.mode_change(Mode[tok[1]]))
        mode = {"SB": Mode.SB, "AB": Mode.AB, "ABP": Mode.AB_PIM}[tok[0]]
        kind = CmdKind(tok[1])
        kv = dict(t.split("=", 1) for t in tok[2:])
        cmd = DramCommand(
            kind,
            addr=int(kv.get("addr", "0"), 0),
            bank=int(kv["bank"]) if "bank" in kv else None,
            row=int(kv.get("row", "0"), 0),
            payload=bytes.fromhex(kv["data"]) if "data" in kv else None,
        )
        crf = int(kv["crf"]) if "crf" in kv else None
        aam = int(kv["aam"]) if "aam" in kv else None
        return cls(mode, cmd, crf, aam)


class CommandTrace(list):
    """Ordered ``TraceEntry`` list with a line-oriented text form."""

    def dumps(self) -> str:
        return "".join(e.to_line() + "\n" for e in self)

    @classmethod
    def loads(cls, text: str) -> "CommandTrace":
        return cls(TraceEntry.from_line(l) for l in text.splitlines() if l.strip() and not l.startswith("#"))

    def commands(self) -> list:
        return [e.command for e in self]

    def column_writes(self) -> int:
        return sum(1 for e in self if e.command.kind is CmdKind.COL_WRITE)


@dataclass
class DeviceConfig:
    bank_capacity: int = DEFAULT_BANK_CAPACITY
    # "bank0": scalar/vector broadcasts read the lowest even (or odd) bank;
    # "local": every unit reads its own bank (data replicated by the host)
    broadcast_source: str = "bank0"
    fused_mac: bool = False

    def __post_init__(self):
        if self.bank_capacity <= 0 or self.bank_capacity % BLOCK:
            raise ValueError("bank capacity must be a positive multiple of 32 bytes")
        if self.broadcast_source not in ("bank0", "local"):
            raise ValueError(f"unknown broadcast source {self.broadcast_source!r}")


@dataclass
class PimUnitState:
    crf: list
    grf_a: np.ndarray
    grf_b: np.ndarray
    srf_a: np.ndarray
    srf_m: np.ndarray
    pc: int
    aam_step: int


@dataclass
class PseudoChannelState:
    bank_capacity: int = DEFAULT_BANK_CAPACITY
    mode: Mode = Mode.SB
    banks: np.ndarray = None
    crf: np.ndarray = None
    grf_a: np.ndarray = None
    grf_b: np.ndarray = None
    srf_a: np.ndarray = None
    srf_m: np.ndarray = None
    pc: int = 0
    aam_step: int = 0
    jump_left: Optional[int] = None
    exited: bool = False

    def __post_init__(self):
        if self.banks is None:
            self.banks = np.zeros((NUM_BANKS, self.bank_capacity // 2), dtype=np.uint16)
        if self.crf is None:
            self.crf = np.zeros((NUM_UNITS, CRF_ENTRIES), dtype=np.uint32)
        for name, shape in (("grf_a", (NUM_UNITS, GRF_REGS, LANES)), ("grf_b", (NUM_UNITS, GRF_REGS, LANES)),
                            ("srf_a", (NUM_UNITS, SRF_REGS)), ("srf_m", (NUM_UNITS, SRF_REGS))):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape, dtype=np.uint16))

    def copy(self) -> "PseudoChannelState":
        return PseudoChannelState(
            self.bank_capacity, self.mode, self.banks.copy(), self.crf.copy(), self.grf_a.copy(),
            self.grf_b.copy(), self.srf_a.copy(), self.srf_m.copy(), self.pc, self.aam_step,
            self.jump_left, self.exited)

    def unit(self, u: int) -> PimUnitState:
        return PimUnitState([int(w) for w in self.crf[u]], self.grf_a[u].copy(), self.grf_b[u].copy(),
                            self.srf_a[u].copy(), self.srf_m[u].copy(), self.pc, self.aam_step)

    def equals(self, other: "PseudoChannelState") -> bool:
        return self.to_snapshot() == other.to_snapshot()

    # snapshot layout (little-endian):
    #   8s magic | u8 mode | u8 pc | u8 aam_step | u8 flags | u8 jump_left | 3x pad | u32 capacity
    #   16 x bank blob (capacity bytes each)
    #   8 x unit: 32 x u32 crf | 8x16 u16 grf_a | 8x16 u16 grf_b | 8 u16 srf_a | 8 u16 srf_m
    def to_snapshot(self) -> bytes:
        flags = int(self.exited) | (2 if self.jump_left is not None else 0)
        mode = list(Mode).index(self.mode)
        head = struct.pack("<8sBBBBB3xI", SNAPSHOT_MAGIC, mode, self.pc, self.aam_step, flags,
                           self.jump_left or 0, self.bank_capacity)
        parts = [head, self.banks.astype("<u2").tobytes()]
        for u in range(NUM_UNITS):
            parts += [self.crf[u].astype("<u4").tobytes(), self.grf_a[u].astype("<u2").tobytes(),
                      self.grf_b[u].astype("<u2").tobytes(), self.srf_a[u].astype("<u2").tobytes(),
                      self.srf_m[u].astype("<u2").tobytes()]
        return b"".join(parts)

    @classmethod
    def from_snapshot(cls, data: bytes) -> "PseudoChannelState":
        head = struct.calcsize("<8sBBBBB3xI")
        magic, mode, pc, aam, flags, jl, cap = struct.unpack_from("<8sBBBBB3xI", data)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError("not a PIM snapshot")
        pos = head
        nbank = NUM_BANKS * cap
        banks = np.frombuffer(data, "<u2", nbank // 2, pos).reshape(NUM_BANKS, cap // 2).astype(np.uint16)
        pos += nbank
        st = cls(cap, list(Mode)[mode], banks, pc=pc, aam_step=aam,
                 jump_left=jl if flags & 2 else None, exited=bool(flags & 1))
        for u in range(NUM_UNITS):
            st.crf[u] = np.frombuffer(data, "<u4", CRF_ENTRIES, pos)
            pos += 4 * CRF_ENTRIES
            st.grf_a[u] = np.frombuffer(data, "<u2", GRF_REGS * LANES, pos).reshape(GRF_REGS, LANES)
            pos += 2 * GRF_REGS * LANES
            st.grf_b[u] = np.frombuffer(data, "<u2", GRF_REGS * LANES, pos).reshape(GRF_REGS, LANES)
            pos += 2 * GRF_REGS * LANES
            st.srf_a[u] = np.frombuffer(data, "<u2", SRF_REGS, pos)
            pos += 2 * SRF_REGS
            st.srf_m[u] = np.frombuffer(data, "<u2", SRF_REGS, pos)
            pos += 2 * SRF_REGS
        if pos != len(data):
            raise ValueError("trailing bytes in snapshot")
        return st


class PseudoChannel:
    """A pseudo-channel driven one DRAM command at a time.

    All mutation goes through ``apply`` (and the helpers built on it), so a
    recorded trace replayed on a copy of the starting state reproduces the
    final state exactly.
    """

    def __init__(self, config: Optional[DeviceConfig] = None, state: Optional[PseudoChannelState] = None,
                 record: bool = False):
        self.config = config or DeviceConfig()
        self.state = state or PseudoChannelState(self.config.bank_capacity)
        if self.state.bank_capacity != self.config.bank_capacity:
            raise ValueError("state and config disagree on bank capacity")
        self.trace: Optional[CommandTrace] = CommandTrace() if record else None
        self.pim_commands = 0
        self._rebind()

    def _rebind(self):
        st = self.state
        self._even = st.banks[0::2]
        self._odd = st.banks[1::2]
        self._decoded = [None] * CRF_ENTRIES
        self._kernels = [None] * CRF_ENTRIES

    def restore(self, state: PseudoChannelState) -> None:
        self.state = state
        self._rebind()

    @property
    def mode(self) -> Mode:
        return self.state.mode

    # --- command entry point ----------------------------------------------

    def apply(self, cmd: DramCommand) -> Annotation:
        mode = self.state.mode
        if cmd.kind is CmdKind.MODE_CHANGE:
            if cmd.target is None:
                raise DeviceError("mode change without target")
            self.state.mode = cmd.target
            result = Annotation()
        elif cmd.kind is CmdKind.ACTIVATE:
            if cmd.bank is not None and not 0 <= cmd.bank < NUM_BANKS:
                raise DeviceError(f"bank {cmd.bank} out of range")
            result = Annotation()
        elif mode is Mode.AB_PIM:
            if cmd.payload is not None or cmd.bank is not None:
                raise DeviceError("AB_PIM column commands carry neither data nor a bank")
            crf, aam = self._step(cmd.addr, cmd.kind is CmdKind.COL_WRITE)
            result = Annotation(crf, aam)
        elif mode is Mode.SB:
            result = self._sb(cmd)
        else:
            result = self._ab(cmd)
        if self.trace is not None:
            self.trace.append(TraceEntry(mode, cmd, result.crf, result.aam))
        return result

    def set_mode(self, target: Mode) -> None:
        self.apply(DramCommand.mode_change(target))

    def replay(self, commands: Iterable) -> None:
        for c in commands:
            self.apply(c.command if isinstance(c, TraceEntry) else c)

    # --- SB / AB -----------------------------------------------------------

    def _check_block(self, addr: int, size: int = BLOCK) -> int:
        if addr < 0 or addr + size > self.config.bank_capacity:
            raise DeviceError(f"address {addr:#x} out of bank range")
        if addr % size:
            raise DeviceError(f"address {addr:#x} not aligned to {size} bytes")
        return addr >> 1

    @staticmethod
    def _payload(cmd: DramCommand) -> np.ndarray:
        if cmd.payload is None or len(cmd.payload) != BLOCK:
            raise DeviceError("column write needs a 32-byte payload in SB/AB mode")
        return np.frombuffer(cmd.payload, dtype="<u2").astype(np.uint16)

    def _sb(self, cmd: DramCommand) -> Annotation:
        if cmd.bank is None or not 0 <= cmd.bank < NUM_BANKS:
            raise DeviceError("SB column command needs a bank in 0..15")
        if cmd.addr >= CRF_BASE:
            raise DeviceError("CRF can only be programmed in AB mode")
        off = self._check_block(cmd.addr)
        row = self.state.banks[cmd.bank]
        if cmd.kind is CmdKind.COL_WRITE:
            row[off:off + LANES] = self._payload(cmd)
            return Annotation()
        if cmd.payload is not None:
            raise DeviceError("column read carries no data")
        return Annotation(data=row[off:off + LANES].astype("<u2").tobytes())

    def _ab(self, cmd: DramCommand) -> Annotation:
        if cmd.bank is not None:
            raise DeviceError("AB column commands ignore bank; leave it unset")
        if cmd.addr >= CRF_BASE:
            return self._crf_access(cmd)
        off = self._check_block(cmd.addr)
        if cmd.kind is CmdKind.COL_WRITE:
            self.state.banks[:, off:off + LANES] = self._payload(cmd)
            return Annotation()
        return Annotation(data=self.state.banks[:, off:off + LANES].astype("<u2").tobytes())

    def _crf_access(self, cmd: DramCommand) -> Annotation:
        rel = cmd.addr - CRF_BASE
        if rel % BLOCK or rel >= CRF_ENTRIES * 4:
            raise DeviceError(f"bad CRF address {cmd.addr:#x}")
        j = rel // BLOCK
        st = self.state
        if cmd.kind is CmdKind.COL_READ:
            return Annotation(data=st.crf[0, 8 * j:8 * j + 8].astype("<u4").tobytes())
        words = np.frombuffer(self._payload_bytes(cmd), dtype="<u4")
        if j == 0:
            st.crf[:, 8:] = 0
            st.pc, st.aam_step, st.jump_left, st.exited = 0, 0, None, False
        st.crf[:, 8 * j:8 * j + 8] = words
        self._decoded = [None] * CRF_ENTRIES
        self._kernels = [None] * CRF_ENTRIES
        return Annotation()

    @staticmethod
    def _payload_bytes(cmd):
        if cmd.payload is None or len(cmd.payload) != BLOCK:
            raise DeviceError("CRF write needs a 32-byte payload")
        return cmd.payload

    def load_crf(self, program: PepProgram) -> None:
        """Broadcast a program into every unit's CRF (one write per 8 entries)."""
        if self.state.mode is not Mode.AB:
            raise DeviceError(f"CRF load needs AB mode, device is in {self.state.mode.value}")
        words = program.words()
        for j in range(0, len(words), 8):
            chunk = words[j:j + 8] + [0] * (8 - len(words[j:j + 8]))
            self.apply(DramCommand.write(CRF_BASE + 4 * j, struct.pack("<8I", *chunk)))

    # --- AB_PIM execution --------------------------------------------------

    def _instr(self, slot: int) -> PimInstruction:
        ins = self._decoded[slot]
        if ins is None:
            try:
                ins = decode(int(self.state.crf[0, slot]))
            except EncodingError as exc:
                raise DeviceError(f"CRF[{slot}]: {exc}") from None
            self._decoded[slot] = ins
        return ins

    def _settle(self) -> None:
        st = self.state
        while not st.exited:
            if st.pc >= CRF_ENTRIES:
                raise DeviceError("program counter ran past the CRF")
            ins = self._instr(st.pc)
            if ins.opcode is Opcode.EXIT:
                st.exited = True
            elif ins.opcode is Opcode.JUMP:
                if st.jump_left is None:
                    st.jump_left = ins.jump_count
                if st.jump_left > 0:
                    st.jump_left -= 1
                    st.pc += ins.jump_offset
                    if st.pc < 0:
                        raise DeviceError("JUMP target before CRF start")
                else:
                    st.jump_left = None
                    st.pc += 1
            else:
                return

    def _step(self, addr: int, is_write: bool):
        st = self.state
        self._settle()
        if st.exited:
            raise DeviceError("AB_PIM command after EXIT")
        pc = st.pc
        ins = self._instr(pc)
        if ins.writes_bank != is_write and ins.opcode is not Opcode.NOP:
            kind = "write" if ins.writes_bank else "read"
            raise DeviceError(f"CRF[{pc}] {ins} must be triggered by a column {kind}")
        kernel = self._kernels[pc]
        if kernel is None:
            kernel = self._kernels[pc] = self._compile(ins)
        kernel(addr)
        step = st.aam_step
        if ins.aam:
            st.aam_step = step + 1
            if st.aam_step == AAM_STEPS:
                st.aam_step = 0
                st.pc = pc + 1
        else:
            st.pc = pc + 1
        self.pim_commands += 1
        self._settle()
        return pc, step

    def run_schedule(self, entries) -> int:
        """Issue ``(crf_slot, addr)`` pairs in AB_PIM mode; returns commands issued.

        Each slot must match the program counter at issue time, which catches
        schedules that drift out of step with the loaded program.
        """
        if self.state.mode is not Mode.AB_PIM:
            raise DeviceError("schedules run in AB_PIM mode")
        st = self.state
        n = 0
        recording = self.trace is not None
        for slot, addr in entries:
            self._settle()
            if not st.exited and st.pc != slot:
                raise DeviceError(f"schedule expects CRF[{slot}] but pc is {st.pc}")
            if recording:
                w = (not st.exited) and self._instr(st.pc).writes_bank
                cmd = DramCommand.write(addr) if w else DramCommand.read(addr)
                self.apply(cmd)
            else:
                if st.exited:
                    raise DeviceError("AB_PIM command after EXIT")
                self._step(addr, self._instr(st.pc).writes_bank)
            n += 1
        return n

    # --- kernels -------------------------------------------------------------

    def _vec_src(self, o, scalar_fill=False):
        """Return f(addr) -> array broadcastable to (units, lanes)."""
        st = self.state
        kind = o.kind
        if kind.is_bank:
            bank = self._even if kind is OperandKind.EVEN_BANK else self._odd
            check = self._check_block

            def src(addr):
                off = check(addr)
                return bank[:, off:off + LANES]
            return src
        reg = {OperandKind.GRF_A: st.grf_a, OperandKind.GRF_B: st.grf_b,
               OperandKind.SRF_A: st.srf_a, OperandKind.SRF_M: st.srf_m}[kind]
        if kind.is_grf:
            if o.aam:
                return lambda addr: reg[:, (addr >> 5) & 7, :]
            i = o.index
            return lambda addr: reg[:, i, :]
        if o.aam:
            return lambda addr: reg[:, (addr >> 5) & 7, None]
        i = o.index
        return lambda addr: reg[:, i, None]

    def _grf_dst(self, o):
        st = self.state
        reg = st.grf_a if o.kind is OperandKind.GRF_A else st.grf_b
        if o.aam:
            return lambda addr: reg[:, (addr >> 5) & 7, :]
        i = o.index
        return lambda addr: reg[:, i, :]

    def _compile(self, ins: PimInstruction):
        op = ins.opcode
        if op is Opcode.NOP:
            return lambda addr: None
        fused = self.config.fused_mac
        if op in (Opcode.ADD, Opcode.MUL, Opcode.MAD, Opcode.MAC):
            if op is Opcode.MAC and ins.aam and OperandKind.SRF_M in (ins.src0.kind, ins.src1.kind):
                def reject(addr):
                    raise RoutingError("SRF_M cannot feed MAC in address-aligned mode")
                return reject
            a, b = self._vec_src(ins.src0), self._vec_src(ins.src1)
            dst = self._grf_dst(ins.dst)
            if op is Opcode.ADD:
                fn = fp16.vec_add

                def kernel(addr):
                    dst(addr)[...] = fn(a(addr), b(addr))
            elif op is Opcode.MUL:
                fn = fp16.vec_mul

                def kernel(addr):
                    dst(addr)[...] = fn(a(addr), b(addr))
            else:
                def kernel(addr):
                    d = dst(addr)
                    d[...] = fp16.vec_mac(d, a(addr), b(addr), fused=fused)
            return kernel
        if op is Opcode.FILL:
            return self._compile_fill(ins)
        # MOV
        src = self._vec_src(ins.src0)
        if ins.dst.kind.is_bank:
            bank = self._even if ins.dst.kind is OperandKind.EVEN_BANK else self._odd
            check = self._check_block

            def kernel(addr):
                off = check(addr)
                bank[:, off:off + LANES] = src(addr)
            return kernel
        dst = self._grf_dst(ins.dst)

        def kernel(addr):
            dst(addr)[...] = src(addr)
        return kernel

    def _compile_fill(self, ins: PimInstruction):
        st = self.state
        even = ins.src0.kind is OperandKind.EVEN_BANK
        bank = self._even if even else self._odd
        from_one = ins.broadcast and self.config.broadcast_source == "bank0"
        check = self._check_block
        d = ins.dst
        if d.kind.is_srf:
            reg = st.srf_a if d.kind is OperandKind.SRF_A else st.srf_m
            fixed = d.index

            def kernel(addr):
                off = check(addr, 2)
                i = (addr >> 1) & 7 if d.aam else fixed
                reg[:, i] = bank[0, off] if from_one else bank[:, off]
            return kernel
        dst = self._grf_dst(d)

        def kernel(addr):
            off = check(addr)
            dst(addr)[...] = bank[0, off:off + LANES] if from_one else bank[:, off:off + LANES]
        return kernel

    # --- host conveniences (all routed through apply) -----------------------

    def write_block(self, bank: int, addr: int, values) -> None:
        data = np.asarray(values, dtype=np.uint16).astype("<u2").tobytes()
        self.apply(DramCommand.write(addr, data, bank=bank))

    def read_block(self, bank: int, addr: int) -> np.ndarray:
        data = self.apply(DramCommand.read(addr, bank=bank)).data
        return np.frombuffer(data, dtype="<u2").astype(np.uint16)

    def snapshot(self) -> bytes:
        return self.state.to_snapshot()
