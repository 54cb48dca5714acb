"""PIM instruction set: types, 32-bit encoding and a small text assembler.

Word layout (bit 31 is the MSB)::

    31..28  opcode   0 NOP  1 ADD  2 MUL  3 MAD  4 MAC  5 MOV  6 FILL  7 JUMP  8 EXIT
                     9..15 reserved

  arithmetic / data movement
    27..25 dst kind   24..22 dst index   21 dst aam
    20..18 src0 kind  17..15 src0 index  14 src0 aam
    13..11 src1 kind  10..8  src1 index   7 src1 aam
     6     broadcast
     5..0  reserved, zero

  JUMP
    27..20 taken count (0..255)
    19..12 signed offset relative to the JUMP slot (-128..127)
    11..0  reserved, zero

  NOP / EXIT: bits 27..0 zero.

Operand kinds: 0 none, 1 GRF_A, 2 GRF_B, 3 SRF_A, 4 SRF_M, 5 EVEN_BANK,
6 ODD_BANK, 7 reserved.  Bank operands never carry an index or aam bit;
their address comes from the triggering column command.

Assembly grammar, one instruction per line, ``;`` starts a comment::

    [label:] MNEMONIC [operand {, operand}] [aam] [bcast]
    operand := GRF_A[i] | GRF_B[i] | SRF_A[i] | SRF_M[i] | EVEN_BANK | ODD_BANK
    JUMP target, count        ; target is a label or a signed offset

Under ``aam`` a register operand written without ``[i]`` takes its index
from the command address; operands with an explicit index stay fixed.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, field
from typing import Optional

from .errors import AssemblyError, EncodingError, ProgramError

CRF_ENTRIES = 32
MAX_JUMP_COUNT = 255


class Opcode(enum.IntEnum):
    NOP = 0
    ADD = 1
    MUL = 2
    MAD = 3
    MAC = 4
    MOV = 5
    FILL = 6
    JUMP = 7
    EXIT = 8


class OperandKind(enum.IntEnum):
    GRF_A = 1
    GRF_B = 2
    SRF_A = 3
    SRF_M = 4
    EVEN_BANK = 5
    ODD_BANK = 6

    @property
    def is_bank(self) -> bool:
        return self in (OperandKind.EVEN_BANK, OperandKind.ODD_BANK)

    @property
    def is_grf(self) -> bool:
        return self in (OperandKind.GRF_A, OperandKind.GRF_B)

    @property
    def is_srf(self) -> bool:
        return self in (OperandKind.SRF_A, OperandKind.SRF_M)


ARITH = (Opcode.ADD, Opcode.MUL, Opcode.MAD, Opcode.MAC)
MOVES = (Opcode.MOV, Opcode.FILL)

_REG_KINDS = {OperandKind.GRF_A, OperandKind.GRF_B, OperandKind.SRF_A, OperandKind.SRF_M}
_BANK_KINDS = {OperandKind.EVEN_BANK, OperandKind.ODD_BANK}
_GRF_KINDS = {OperandKind.GRF_A, OperandKind.GRF_B}

# allowed kinds per slot: (dst, src0, src1)
_ROUTES = {
    Opcode.ADD: (_GRF_KINDS, _REG_KINDS | _BANK_KINDS, _REG_KINDS | _BANK_KINDS),
    Opcode.MUL: (_GRF_KINDS, _REG_KINDS | _BANK_KINDS, _REG_KINDS | _BANK_KINDS),
    Opcode.MAD: (_GRF_KINDS, _REG_KINDS | _BANK_KINDS, _REG_KINDS | _BANK_KINDS),
    Opcode.MAC: (_GRF_KINDS, _REG_KINDS | _BANK_KINDS, _REG_KINDS | _BANK_KINDS),
    Opcode.FILL: (_REG_KINDS, _BANK_KINDS, None),
    Opcode.MOV: (_GRF_KINDS | _BANK_KINDS, _REG_KINDS, None),
}


@dataclass(frozen=True)
class Operand:
    kind: OperandKind
    index: int = 0
    aam: bool = False

    def __post_init__(self):
        if self.kind.is_bank and (self.index or self.aam):
            raise ValueError(f"{self.kind.name} takes no index or aam flag")
        if not 0 <= self.index <= 7:
            raise ValueError(f"register index {self.index} out of range 0..7")
        if self.aam and self.index:
            raise ValueError("an address-aligned operand has no static index")

    def __str__(self) -> str:
        if self.kind.is_bank or self.aam:
            return self.kind.name
        return f"{self.kind.name}[{self.index}]"


def grf_a(i=None):
    return Operand(OperandKind.GRF_A, i or 0, i is None)


def grf_b(i=None):
    return Operand(OperandKind.GRF_B, i or 0, i is None)


def srf_a(i=None):
    return Operand(OperandKind.SRF_A, i or 0, i is None)


def srf_m(i=None):
    return Operand(OperandKind.SRF_M, i or 0, i is None)


EVEN_BANK = Operand(OperandKind.EVEN_BANK)
ODD_BANK = Operand(OperandKind.ODD_BANK)


@dataclass(frozen=True)
class PimInstruction:
    opcode: Opcode
    dst: Optional[Operand] = None
    src0: Optional[Operand] = None
    src1: Optional[Operand] = None
    jump_offset: int = 0
    jump_count: int = 0
    broadcast: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        op = self.opcode
        if op in (Opcode.NOP, Opcode.EXIT, Opcode.JUMP):
            if self.dst or self.src0 or self.src1 or self.broadcast:
                raise ValueError(f"{op.name} takes no operands")
            if op is not Opcode.JUMP and (self.jump_offset or self.jump_count):
                raise ValueError(f"{op.name} takes no jump fields")
            if op is Opcode.JUMP:
                if not 0 <= self.jump_count <= MAX_JUMP_COUNT:
                    raise ValueError(f"JUMP count {self.jump_count} outside 0..{MAX_JUMP_COUNT}")
                if not -128 <= self.jump_offset <= 127:
                    raise ValueError(f"JUMP offset {self.jump_offset} outside -128..127")
            return
        if self.jump_offset or self.jump_count:
            raise ValueError(f"{op.name} takes no jump fields")
        dst_ok, s0_ok, s1_ok = _ROUTES[op]
        if self.dst is None or self.src0 is None:
            raise ValueError(f"{op.name} needs a destination and a source")
        if self.dst.kind not in dst_ok:
            raise ValueError(f"{op.name} cannot write {self.dst.kind.name}")
        if self.src0.kind not in s0_ok:
            raise ValueError(f"{op.name} cannot read {self.src0.kind.name} as first source")
        if s1_ok is None:
            if self.src1 is not None:
                raise ValueError(f"{op.name} takes a single source")
        else:
            if self.src1 is None:
                raise ValueError(f"{op.name} needs two sources")
            if self.src1.kind not in s1_ok:
                raise ValueError(f"{op.name} cannot read {self.src1.kind.name}")
        banks = sum(1 for o in self.operands if o.kind.is_bank)
        if banks > 1:
            raise ValueError("at most one bank operand per instruction")
        if self.broadcast and op is not Opcode.FILL:
            raise ValueError("broadcast applies to FILL only")

    @property
    def operands(self) -> tuple:
        return tuple(o for o in (self.dst, self.src0, self.src1) if o is not None)

    @property
    def aam(self) -> bool:
        """True when the instruction repeats over eight address-aligned steps."""
        return any(o.aam for o in self.operands)

    @property
    def bank_operand(self) -> Optional[Operand]:
        for o in self.operands:
            if o.kind.is_bank:
                return o
        return None

    @property
    def writes_bank(self) -> bool:
        return self.dst is not None and self.dst.kind.is_bank

    @property
    def is_control(self) -> bool:
        return self.opcode in (Opcode.JUMP, Opcode.EXIT)

    def __str__(self) -> str:
        op = self.opcode
        if op is Opcode.JUMP:
            return f"JUMP {self.jump_offset:+d}, {self.jump_count}"
        if op in (Opcode.NOP, Opcode.EXIT):
            return op.name
        text = f"{op.name} " + ", ".join(str(o) for o in self.operands)
        if self.aam:
            text += " aam"
        if self.broadcast:
            text += " bcast"
        return text


NOP = PimInstruction(Opcode.NOP)
EXIT = PimInstruction(Opcode.EXIT)


def jump(offset: int, count: int) -> PimInstruction:
    return PimInstruction(Opcode.JUMP, jump_offset=offset, jump_count=count)


# --- binary encoding -------------------------------------------------------

def _enc_operand(o: Optional[Operand]) -> int:
    if o is None:
        return 0
    return (int(o.kind) << 4) | (o.index << 1) | int(o.aam)


def encode(ins: PimInstruction) -> int:
    word = int(ins.opcode) << 28
    if ins.opcode is Opcode.JUMP:
        return word | (ins.jump_count << 20) | ((ins.jump_offset & 0xFF) << 12)
    if ins.opcode in ARITH or ins.opcode in MOVES:
        word |= _enc_operand(ins.dst) << 21
        word |= _enc_operand(ins.src0) << 14
        word |= _enc_operand(ins.src1) << 7
        word |= int(ins.broadcast) << 6
    return word


def _dec_operand(field7: int, word: int) -> Optional[Operand]:
    kind = field7 >> 4
    if kind == 0:
        if field7:
            raise EncodingError(f"stray operand bits in {word:#010x}")
        return None
    if kind == 7:
        raise EncodingError(f"reserved operand kind in {word:#010x}")
    try:
        return Operand(OperandKind(kind), (field7 >> 1) & 7, bool(field7 & 1))
    except ValueError as exc:
        raise EncodingError(f"{exc} in {word:#010x}") from None


def decode(word: int) -> PimInstruction:
    if not 0 <= word <= 0xFFFFFFFF:
        raise EncodingError(f"not a 32-bit word: {word}")
    code = word >> 28
    try:
        op = Opcode(code)
    except ValueError:
        raise EncodingError(f"reserved opcode {code} in {word:#010x}") from None
    body = word & 0x0FFFFFFF
    if op in (Opcode.NOP, Opcode.EXIT):
        if body:
            raise EncodingError(f"{op.name} with nonzero operand bits: {word:#010x}")
        return PimInstruction(op)
    if op is Opcode.JUMP:
        if body & 0xFFF:
            raise EncodingError(f"JUMP with reserved bits set: {word:#010x}")
        off = (body >> 12) & 0xFF
        if off >= 0x80:
            off -= 0x100
        return PimInstruction(op, jump_offset=off, jump_count=(body >> 20) & 0xFF)
    if body & 0x3F:
        raise EncodingError(f"reserved bits set: {word:#010x}")
    try:
        return PimInstruction(
            op,
            dst=_dec_operand((word >> 21) & 0x7F, word),
            src0=_dec_operand((word >> 14) & 0x7F, word),
            src1=_dec_operand((word >> 7) & 0x7F, word),
            broadcast=bool(word & 0x40),
        )
    except ValueError as exc:
        raise EncodingError(f"malformed instruction {word:#010x}: {exc}") from None


# --- programs --------------------------------------------------------------

class PepKind(enum.Enum):
    ADD_PEP = "ADD"
    MUL_PEP = "MUL"
    SUB_PEP = "SUB"
    MAC_PEP = "MAC"


@dataclass(frozen=True)
class PepProgram:
    """A CRF image of at most 32 instructions ending in a single EXIT."""

    crf_image: tuple
    kind: Optional[PepKind] = None
    iterations: int = 1
    flops: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crf_image", tuple(self.crf_image))
        validate_program(self.crf_image)
        jumps = [i for i in self.crf_image if i.opcode is Opcode.JUMP]
        expected = jumps[0].jump_count + 1 if jumps else 1
        if self.iterations != expected:
            raise ProgramError(f"iterations={self.iterations} but the JUMP runs the body {expected} times")

    def __len__(self):
        return len(self.crf_image)

    def words(self) -> list:
        return [encode(i) for i in self.crf_image]

    def to_image(self) -> bytes:
        """Binary CRF dump: 32 little-endian words, NOP padded."""
        words = self.words() + [0] * (CRF_ENTRIES - len(self.crf_image))
        return struct.pack("<32I", *words)

    @classmethod
    def from_image(cls, data: bytes, kind=None, flops=0) -> "PepProgram":
        if len(data) != 4 * CRF_ENTRIES:
            raise EncodingError(f"CRF image must be {4 * CRF_ENTRIES} bytes, got {len(data)}")
        instrs = [decode(w) for w in struct.unpack("<32I", data)]
        end = next((i for i, ins in enumerate(instrs) if ins.opcode is Opcode.EXIT), None)
        if end is None:
            raise ProgramError("CRF image has no EXIT")
        if any(ins != NOP for ins in instrs[end + 1:]):
            raise ProgramError("non-NOP entries after EXIT")
        return make_program(instrs[: end + 1], kind=kind, flops=flops)

    def disassemble(self) -> str:
        return "\n".join(str(i) for i in self.crf_image) + "\n"


def validate_program(instrs) -> None:
    if not instrs:
        raise ProgramError("empty CRF program (EXIT required)")
    if len(instrs) > CRF_ENTRIES:
        raise ProgramError(f"CRF overflow: {len(instrs)} entries > {CRF_ENTRIES}")
    exits = [k for k, i in enumerate(instrs) if i.opcode is Opcode.EXIT]
    if exits != [len(instrs) - 1]:
        raise ProgramError("exactly one EXIT is required, as the last entry")
    jumps = [k for k, i in enumerate(instrs) if i.opcode is Opcode.JUMP]
    if len(jumps) > 1:
        raise ProgramError("JUMP nesting is not supported (more than one JUMP)")
    for k in jumps:
        target = k + instrs[k].jump_offset
        if not 0 <= target < k:
            raise ProgramError(f"JUMP at {k} must target an earlier entry, got {target}")


def make_program(instrs, kind=None, flops=0) -> PepProgram:
    jumps = [i for i in instrs if i.opcode is Opcode.JUMP]
    iterations = jumps[0].jump_count + 1 if jumps else 1
    return PepProgram(tuple(instrs), kind=kind, iterations=iterations, flops=flops)


# --- assembler -------------------------------------------------------------

_OPERAND_RE = re.compile(r"^(GRF_A|GRF_B|SRF_A|SRF_M|EVEN_BANK|ODD_BANK)(?:\[(\d+)\])?$")
_LABEL_RE = re.compile(r"^([A-Za-z_]\w*)\s*:")


@dataclass
class _Line:
    number: int
    col: int
    text: str
    labels: list = field(default_factory=list)


def assemble(text: str, kind: Optional[PepKind] = None, flops: int = 0) -> PepProgram:
    """Assemble mnemonic text into a validated ``PepProgram``."""
    lines = []
    labels = {}
    pending = []
    for number, raw in enumerate(text.splitlines(), start=1):
        body = raw.split(";", 1)[0]
        col = len(body) - len(body.lstrip()) + 1
        body = body.strip()
        while True:
            m = _LABEL_RE.match(body)
            if not m:
                break
            name = m.group(1)
            if name in labels or name in pending:
                raise AssemblyError(f"duplicate label {name!r}", number, col)
            pending.append(name)
            body = body[m.end():].strip()
        if not body:
            continue
        for name in pending:
            labels[name] = len(lines)
        pending = []
        lines.append(_Line(number, col, body))
    if pending:
        raise AssemblyError(f"label {pending[0]!r} at end of program has no instruction")
    if len(lines) > CRF_ENTRIES:
        raise AssemblyError(f"CRF overflow: {len(lines)} instructions > {CRF_ENTRIES}",
                            lines[CRF_ENTRIES].number)

    instrs = []
    for slot, line in enumerate(lines):
        instrs.append(_assemble_line(line, slot, labels))
    try:
        return make_program(instrs, kind=kind, flops=flops)
    except ProgramError as exc:
        raise AssemblyError(str(exc), lines[-1].number) from None


def _assemble_line(line: _Line, slot: int, labels: dict) -> PimInstruction:
    parts = line.text.split(None, 1)
    mnem = parts[0].upper()
    rest = parts[1] if len(parts) > 1 else ""
    try:
        op = Opcode[mnem]
    except KeyError:
        raise AssemblyError(f"unknown mnemonic {parts[0]!r}", line.number, line.col) from None

    if op in (Opcode.NOP, Opcode.EXIT):
        if rest.strip():
            raise AssemblyError(f"{op.name} takes no operands", line.number, line.col)
        return PimInstruction(op)

    if op is Opcode.JUMP:
        args = [a.strip() for a in rest.split(",")]
        if len(args) != 2:
            raise AssemblyError("JUMP expects 'target, count'", line.number, line.col)
        target, count = args
        if target in labels:
            offset = labels[target] - slot
        else:
            try:
                offset = int(target, 0)
            except ValueError:
                raise AssemblyError(f"undefined label {target!r}", line.number, line.col) from None
        try:
            return PimInstruction(op, jump_offset=offset, jump_count=int(count, 0))
        except ValueError as exc:
            raise AssemblyError(str(exc), line.number, line.col) from None

    flags = set()
    tokens = rest.replace(",", " , ").split()
    while tokens and tokens[-1].lower() in ("aam", "bcast"):
        flags.add(tokens.pop().lower())
    operand_text = " ".join(tokens)
    fields = [f.strip() for f in operand_text.split(",")] if operand_text.strip() else []
    operands = []
    for f in fields:
        m = _OPERAND_RE.match(f.replace(" ", "").upper())
        if not m:
            col = line.col + line.text.find(f) if f else line.col
            raise AssemblyError(f"bad operand {f!r}", line.number, col)
        kind = OperandKind[m.group(1)]
        if m.group(2) is not None:
            idx = int(m.group(2))
            if kind.is_bank:
                raise AssemblyError(f"{kind.name} takes no index", line.number, line.col)
            operands.append((kind, idx, False))
        elif kind.is_bank:
            operands.append((kind, 0, False))
        elif "aam" in flags:
            operands.append((kind, 0, True))
        else:
            raise AssemblyError(f"{kind.name} needs an index unless the instruction is aam",
                                line.number, line.col)
    if len(operands) > 3:
        raise AssemblyError("too many operands", line.number, line.col)
    try:
        ops = [Operand(k, i, a) for k, i, a in operands]
        ops += [None] * (3 - len(ops))
        ins = PimInstruction(op, dst=ops[0], src0=ops[1], src1=ops[2], broadcast="bcast" in flags)
    except (ValueError, IndexError) as exc:
        raise AssemblyError(str(exc), line.number, line.col) from None
    if "aam" in flags and not ins.aam:
        raise AssemblyError("aam given but no operand is address-aligned", line.number, line.col)
    return ins
