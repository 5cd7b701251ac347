import json
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from speedsim.isa import (
    AssemblyError, ConfigError, EncodingError, IllegalInstruction, Instruction, Mnemonic,
    Precision, Strategy, VsaCsr, assemble, decode_csr, decode_instruction, disassemble,
    encode_csr, encode_instruction, encode_vtype,
)

FIXTURES = Path(__file__).parent / "fixtures"
reg = st.integers(0, 31)


@st.composite
def instructions(draw):
    m = draw(st.sampled_from(list(Mnemonic)))
    if m is Mnemonic.VSACFG:
        return Instruction(m, rd=draw(reg), zimm=draw(st.integers(0, 511)), uimm=draw(st.integers(0, 31)))
    if m is Mnemonic.VSALD:
        return Instruction(m, vd=draw(reg), rs1=draw(reg), width=draw(st.sampled_from([4, 8, 16])))
    if m in (Mnemonic.VSAM, Mnemonic.VSAC, Mnemonic.VMACC):
        return Instruction(m, vd=draw(reg), vs1=draw(reg), vs2=draw(reg))
    if m is Mnemonic.VSETVLI:
        return Instruction(m, rd=draw(reg), rs1=draw(reg), zimm=draw(st.integers(0, 255)))
    widths = [8, 16] if m is Mnemonic.VLE else [8, 16, 32]
    return Instruction(m, vd=draw(reg), rs1=draw(reg), width=draw(st.sampled_from(widths)))


@settings(max_examples=10_000, deadline=None)
@given(instructions())
def test_round_trip(instr):
    word = encode_instruction(instr)
    assert 0 <= word < 1 << 32
    assert decode_instruction(word) == instr
    assert encode_instruction(decode_instruction(word)) == word


@settings(max_examples=3000, deadline=None)
@given(st.integers(0, (1 << 32) - 1))
def test_words_in_image_reencode(word):
    try:
        instr = decode_instruction(word)
    except IllegalInstruction:
        return
    assert encode_instruction(instr) == word


def test_null_word_is_illegal():
    with pytest.raises(IllegalInstruction) as ei:
        decode_instruction(0)
    assert ei.value.word == 0


def test_vsacfg_layout():
    csr = VsaCsr(Precision.INT8, 3, Strategy.FFCS, 2, 1)
    zimm, uimm = encode_csr(csr)
    assert zimm == 0b001_0011_01
    assert uimm == 2
    word = encode_instruction(Instruction(Mnemonic.VSACFG, rd=5, zimm=zimm, uimm=uimm))
    assert word & 0x7F == 0x0B
    assert (word >> 12) & 0b111 == 0
    assert (word >> 7) & 0x1F == 5
    assert (word >> 20) & 0x1FF == zimm
    assert (word >> 15) & 0x1F == uimm
    assert decode_csr(zimm, uimm) == csr


def test_vsald16_decodes_width():
    instr = Instruction(Mnemonic.VSALD, vd=4, rs1=10, width=16)
    back = decode_instruction(encode_instruction(instr))
    assert back.mnemonic is Mnemonic.VSALD
    assert back.precision is Precision.INT16


def test_minimal_vsam():
    word = encode_instruction(Instruction(Mnemonic.VSAM))
    assert word == 0x0B | (2 << 12)


def test_field_out_of_range_names_field():
    with pytest.raises(EncodingError) as ei:
        encode_instruction(Instruction(Mnemonic.VSAM, vd=32))
    assert ei.value.field == "vd"
    with pytest.raises(EncodingError) as ei:
        encode_instruction(Instruction(Mnemonic.VSACFG, zimm=512))
    assert ei.value.field == "zimm"


@pytest.mark.parametrize("text,name", [
    ("vsetvli x5, x10, e16, m1", "vsetvli"),
    ("vsetvli x1, x2, e8, m4", "vsetvli"),
    ("vle8.v v3, (x10)", "vle8.v"),
    ("vle16.v v4, (a1)", "vle16.v"),
    ("vse8.v v4, (a1)", "vse8.v"),
    ("vse16.v v4, (a1)", "vse16.v"),
    ("vse32.v v31, (x7)", "vse32.v"),
    ("vmacc.vv v8, v4, v0", "vmacc.vv"),
])
def test_baseline_matches_rvv_opcode_table(text, name):
    table = json.loads((FIXTURES / "rvv_opcodes.json").read_text())
    word = assemble(text).encode()[0]
    entry = table[name]
    assert word & int(entry["mask"], 16) == int(entry["match"], 16)


def test_vmacc_fields():
    word = assemble("vmacc.vv v8, v4, v0").encode()[0]
    assert (word >> 7) & 0x1F == 8
    assert (word >> 15) & 0x1F == 4
    assert (word >> 20) & 0x1F == 0
    assert (word >> 25) & 1 == 1


def test_vsetvli_vtype_bits():
    word = assemble("vsetvli x5, x10, e16, m1").encode()[0]
    assert (word >> 20) & 0x7FF == encode_vtype(16, 1) == 0b001_000


class TestAssemble:
    def test_vsam(self):
        (i,) = assemble("vsam.vv v8, v4, v0").instructions
        assert (i.mnemonic, i.vd, i.vs1, i.vs2) == (Mnemonic.VSAM, 8, 4, 0)

    def test_vsald_abi(self):
        (i,) = assemble("vsald16.v v4, (a0)").instructions
        assert (i.mnemonic, i.width, i.vd, i.rs1) == (Mnemonic.VSALD, 16, 4, 10)

    def test_empty(self):
        assert len(assemble("")) == 0
        assert len(assemble("# only a comment\n\n")) == 0

    def test_immediates(self):
        a = assemble("vsacfg x1, 0b001001101, 0x2")
        b = assemble("vsacfg x1, 77, 2")
        assert a.instructions == b.instructions

    def test_unknown_mnemonic_reports_line(self):
        with pytest.raises(AssemblyError) as ei:
            assemble("vsam.vv v1, v2, v3\nvfoo v1\n")
        assert ei.value.line == 2

    def test_register_out_of_range(self):
        with pytest.raises(AssemblyError):
            assemble("vsam.vv v32, v1, v2")
        with pytest.raises(AssemblyError):
            assemble("vsald8.v v1, (x40)")

    def test_syntax_error(self):
        with pytest.raises(AssemblyError):
            assemble("vsam.vv v1, v2")


CANONICAL = """\
vsacfg x5, 0x4d, 2
vsetvli x5, x10, e16, m1
vsald16.v v4, (x10)
vle16.v v0, (x11)
vsam.vv v8, v4, v0
vsac.vv v9, v4, v1
vmacc.vv v8, v4, v0
vse32.v v8, (x12)
"""


def test_disassemble_round_trip():
    assert disassemble(assemble(CANONICAL)) == CANONICAL


class TestCsr:
    def test_mm_int16(self):
        assert decode_csr(0b00_0001_00, 1) == VsaCsr(Precision.INT16, 1, Strategy.MM, 1, 1)

    def test_kernel_zero_reserved(self):
        with pytest.raises(ConfigError):
            decode_csr(0b000_0000_00, 1)

    def test_reserved_codes(self):
        with pytest.raises(ConfigError):
            decode_csr(0b000_0001_11, 1)
        with pytest.raises(ConfigError):
            decode_csr(0b100_0001_00, 1)

    def test_ff_stride(self):
        zimm = (0b011 << 6) | (3 << 2) | 0b01
        csr = decode_csr(zimm, 1 | (1 << 3))
        assert csr.strategy is Strategy.FF and csr.stride == 2 and csr.kernel_size == 3

    def test_mm_normalizes_kernel(self):
        assert VsaCsr(strategy=Strategy.MM, kernel_size=7).kernel_size == 1

    @given(st.sampled_from(list(Precision)), st.integers(1, 15), st.sampled_from(list(Strategy)),
           st.integers(1, 7), st.integers(1, 4))
    def test_csr_round_trip(self, p, k, s, n, stride):
        csr = VsaCsr(p, k, s, n, stride)
        assert decode_csr(*encode_csr(csr)) == csr


def test_precision_packing():
    assert [p.pp for p in (Precision.INT16, Precision.INT8, Precision.INT4)] == [1, 4, 16]
    # sixteen 4-bit multipliers per PE
    for p in Precision:
        assert p.pp * (p.bits // 4) ** 2 == 16
