import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amepim import isa
from amepim.errors import AssemblyError, EncodingError, ProgramError
from amepim.isa import (EVEN_BANK, ODD_BANK, Opcode, Operand, OperandKind, PimInstruction,
                        assemble, decode, encode)

MAC_PEP_TEXT = """
; outer-product step: acc column += A block * 8 scalars of B
loop:
    FILL GRF_B[0], ODD_BANK            ; reload accumulator block
    FILL SRF_A, EVEN_BANK aam bcast    ; 8 scalars of B -> every unit
    ADD  GRF_A, EVEN_BANK, SRF_A aam   ; splat: zero vector + scalar
    MAC  GRF_B[0], EVEN_BANK, GRF_A aam
    MOV  ODD_BANK, GRF_B[0]
    JUMP loop, 255
    EXIT
"""


def _operand(rng, kinds):
    kind = rng.choice(sorted(kinds))
    if kind.is_bank:
        return Operand(kind)
    if rng.random() < 0.4:
        return Operand(kind, 0, True)
    return Operand(kind, rng.randrange(8))


def random_instruction(rng):
    """Rejection-sample a well-formed instruction."""
    while True:
        op = rng.choice(list(Opcode))
        try:
            if op in (Opcode.NOP, Opcode.EXIT):
                return PimInstruction(op)
            if op is Opcode.JUMP:
                return isa.jump(rng.randint(-128, 127), rng.randint(0, 255))
            dst_ok, s0_ok, s1_ok = isa._ROUTES[op]
            return PimInstruction(
                op,
                dst=_operand(rng, dst_ok),
                src0=_operand(rng, s0_ok),
                src1=_operand(rng, s1_ok) if s1_ok else None,
                broadcast=(op is Opcode.FILL and rng.random() < 0.3),
            )
        except ValueError:
            continue


def test_nop_and_jump_roundtrip():
    assert decode(encode(isa.NOP)) == isa.NOP
    assert encode(isa.NOP) == 0
    j = isa.jump(-4, 255)
    assert decode(encode(j)) == j


def test_random_corpus_roundtrip():
    rng = random.Random(7)
    corpus = [random_instruction(rng) for _ in range(10_000)]
    assert {i.opcode for i in corpus} == set(Opcode)
    for ins in corpus:
        w = encode(ins)
        assert 0 <= w < 2**32
        assert decode(w) == ins


@settings(max_examples=2000)
@given(st.integers(0, 2**32 - 1))
def test_decode_encode_identity_on_valid_words(word):
    try:
        ins = decode(word)
    except EncodingError:
        return
    assert encode(ins) == word


@pytest.mark.parametrize("word", [
    0x9 << 28,               # reserved opcode
    0xF << 28,
    0x00000001,              # NOP with stray bits
    (8 << 28) | 0x100,       # EXIT with stray bits
    (7 << 28) | 0x001,       # JUMP reserved bits
    (1 << 28) | (7 << 25),   # reserved operand kind
    (1 << 28) | 0x1,         # reserved low bits
])
def test_decode_rejects_malformed(word):
    with pytest.raises(EncodingError):
        decode(word)


def test_instruction_validation():
    with pytest.raises(ValueError):
        isa.jump(-1, 256)
    with pytest.raises(ValueError):  # arithmetic cannot target a bank
        PimInstruction(Opcode.ADD, ODD_BANK, isa.grf_a(0), isa.grf_b(0))
    with pytest.raises(ValueError):  # two bank operands in one instruction
        PimInstruction(Opcode.ADD, isa.grf_a(0), EVEN_BANK, ODD_BANK)
    with pytest.raises(ValueError):
        PimInstruction(Opcode.MOV, ODD_BANK, isa.grf_b(0), broadcast=True)
    with pytest.raises(ValueError):
        Operand(OperandKind.EVEN_BANK, 3)
    with pytest.raises(ValueError):
        Operand(OperandKind.GRF_A, 8)


def test_assemble_exit_only():
    prog = assemble("EXIT")
    assert len(prog) == 1 and prog.iterations == 1


def test_assemble_mac_pep_listing():
    prog = assemble(MAC_PEP_TEXT)
    ops = [i.opcode for i in prog.crf_image]
    assert ops == [Opcode.FILL, Opcode.FILL, Opcode.ADD, Opcode.MAC, Opcode.MOV, Opcode.JUMP, Opcode.EXIT]
    assert prog.crf_image[1].broadcast and not prog.crf_image[0].broadcast
    assert prog.crf_image[5].jump_offset == -5
    assert prog.iterations == 256
    mac = prog.crf_image[3]
    assert mac.dst == Operand(OperandKind.GRF_B, 0) and mac.src1.aam and mac.aam
    assert not prog.crf_image[0].aam and not prog.crf_image[4].aam


def test_disassemble_reassembles():
    prog = assemble(MAC_PEP_TEXT)
    again = assemble(prog.disassemble())
    assert again.crf_image == prog.crf_image


def test_crf_overflow():
    text = "NOP\n" * 32 + "EXIT\n"
    with pytest.raises(AssemblyError) as exc:
        assemble(text)
    assert exc.value.line == 33
    assert len(assemble("NOP\n" * 31 + "EXIT")) == 32


def test_jump_nesting_rejected():
    text = "a: NOP\nb: NOP\nJUMP b, 1\nJUMP a, 1\nEXIT"
    with pytest.raises(AssemblyError, match="nesting"):
        assemble(text)


@pytest.mark.parametrize("text,line,col", [
    ("NOP\nFROB GRF_A[0]\nEXIT", 2, 1),
    ("  ADD GRF_A[0], GRF_B[9], GRF_A[1]\nEXIT", 1, 3),
    ("ADD GRF_A, EVEN_BANK, GRF_B[0]\nEXIT", 1, 1),    # index-less without aam
    ("JUMP nowhere, 3\nEXIT", 1, 1),
    ("EXIT\nNOP", None, None),
])
def test_assembly_diagnostics(text, line, col):
    with pytest.raises(AssemblyError) as exc:
        assemble(text)
    if line is not None:
        assert exc.value.line == line
        assert exc.value.column == col


def test_program_invariants():
    with pytest.raises(ProgramError):
        isa.make_program([isa.NOP])
    with pytest.raises(ProgramError):
        isa.make_program([isa.EXIT, isa.EXIT])
    with pytest.raises(ProgramError):  # forward jump
        isa.make_program([isa.jump(1, 3), isa.NOP, isa.EXIT])


def test_crf_image_roundtrip():
    prog = assemble(MAC_PEP_TEXT)
    image = prog.to_image()
    assert len(image) == 128
    assert image[7 * 4:] == bytes(4 * 25)  # NOP padding
    assert isa.PepProgram.from_image(image).crf_image == prog.crf_image
    # little-endian word 0
    assert int.from_bytes(image[:4], "little") == encode(prog.crf_image[0])
