"""Instruction set: the four customized vector instructions plus a small RVV subset.

Encodings for the custom instructions live in the RISC-V custom-0 major opcode
(0x0B) with ``funct3`` selecting the instruction.  The baseline subset
(``vsetvli``, ``vle``, ``vse``, ``vmacc.vv``) uses standard RVV v1.0 encodings.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from typing import Iterable


class IsaError(Exception):
    """Base class for instruction-set errors."""


class EncodingError(IsaError):
    def __init__(self, field_name: str, value: int, message: str = ""):
        self.field = field_name
        self.value = value
        super().__init__(message or f"field {field_name!r} out of range: {value}")


class IllegalInstruction(IsaError):
    def __init__(self, word: int, reason: str = ""):
        self.word = word
        super().__init__(f"illegal instruction 0x{word:08x}" + (f" ({reason})" if reason else ""))


class ConfigError(IsaError):
    """Invalid configuration value (reserved CSR code point, bad machine bound, ...)."""


class AssemblyError(IsaError):
    def __init__(self, line: int, message: str, column: int = 1):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class Precision(enum.Enum):
    INT16 = 16
    INT8 = 8
    INT4 = 4

    @property
    def bits(self) -> int:
        return self.value

    @property
    def pp(self) -> int:
        """MACs per PE per cycle: sixteen 4-bit multipliers ganged by precision."""
        return {16: 1, 8: 4, 4: 16}[self.value]

    @property
    def operand_bits(self) -> int:
        """Width of one packed PE operand (PP sub-fields)."""
        return self.pp * self.bits

    @property
    def operand_bytes(self) -> int:
        return self.operand_bits // 8

    @property
    def lo(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def hi(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @classmethod
    def from_bits(cls, bits: int) -> "Precision":
        try:
            return cls(int(bits))
        except ValueError:
            raise ConfigError(f"unsupported precision: {bits}-bit") from None

    def __str__(self) -> str:
        return f"int{self.value}"


class Strategy(enum.Enum):
    MM = "MM"
    FFCS = "FFCS"
    CF = "CF"
    FF = "FF"

    def __str__(self) -> str:
        return self.value


class Mnemonic(enum.Enum):
    VSACFG = "vsacfg"
    VSALD = "vsald"
    VSAM = "vsam"
    VSAC = "vsac"
    VSETVLI = "vsetvli"
    VLE = "vle"
    VSE = "vse"
    VMACC = "vmacc"

    @property
    def is_custom(self) -> bool:
        return self in (Mnemonic.VSACFG, Mnemonic.VSALD, Mnemonic.VSAM, Mnemonic.VSAC)

    @property
    def is_arithmetic(self) -> bool:
        return self in (Mnemonic.VSAM, Mnemonic.VSAC, Mnemonic.VMACC)


@dataclass(frozen=True)
class Instruction:
    """Decoded form of one vector instruction.

    ``width`` is the element width in bits for memory ops (VSALD: 4/8/16,
    VLE: 8/16, VSE: 8/16/32) and 0 otherwise.  Fields a mnemonic does not use
    stay zero so that decode(encode(i)) == i holds structurally.
    """

    mnemonic: Mnemonic
    rd: int = 0
    rs1: int = 0
    vd: int = 0
    vs1: int = 0
    vs2: int = 0
    width: int = 0
    zimm: int = 0
    uimm: int = 0

    @property
    def precision(self) -> Precision | None:
        if self.mnemonic is Mnemonic.VSALD:
            return Precision.from_bits(self.width)
        return None

    def __str__(self) -> str:
        return disassemble_one(self)


# --------------------------------------------------------------------------
# CSR layout for VSACFG
# --------------------------------------------------------------------------

_PREC_CODE = {Precision.INT16: 0b00, Precision.INT8: 0b01, Precision.INT4: 0b10}
_CODE_PREC = {v: k for k, v in _PREC_CODE.items()}
_STRAT_CODE = {Strategy.MM: 0b000, Strategy.FFCS: 0b001, Strategy.CF: 0b010, Strategy.FF: 0b011}
_CODE_STRAT = {v: k for k, v in _STRAT_CODE.items()}


@dataclass(frozen=True)
class VsaCsr:
    precision: Precision = Precision.INT16
    kernel_size: int = 1
    strategy: Strategy = Strategy.MM
    stage_param_n: int = 1
    stride: int = 1

    def __post_init__(self):
        if not 1 <= self.kernel_size <= 15:
            raise ConfigError(f"kernel_size must be in [1, 15], got {self.kernel_size}")
        if not 1 <= self.stage_param_n <= 7:
            raise ConfigError(f"stage_param_n must be in [1, 7], got {self.stage_param_n}")
        if not 1 <= self.stride <= 4:
            raise ConfigError(f"stride must be in [1, 4], got {self.stride}")
        if self.strategy is Strategy.MM and self.kernel_size != 1:
            object.__setattr__(self, "kernel_size", 1)


def encode_csr(csr: VsaCsr) -> tuple[int, int]:
    zimm = _PREC_CODE[csr.precision] | (csr.kernel_size << 2) | (_STRAT_CODE[csr.strategy] << 6)
    uimm = csr.stage_param_n | ((csr.stride - 1) << 3)
    return zimm, uimm


def decode_csr(zimm: int, uimm: int) -> VsaCsr:
    if not 0 <= zimm < 1 << 9:
        raise ConfigError(f"zimm does not fit in 9 bits: {zimm}")
    if not 0 <= uimm < 1 << 5:
        raise ConfigError(f"uimm does not fit in 5 bits: {uimm}")
    pcode = zimm & 0b11
    kernel = (zimm >> 2) & 0b1111
    scode = (zimm >> 6) & 0b111
    if pcode not in _CODE_PREC:
        raise ConfigError(f"reserved precision code {pcode:#04b}")
    if scode not in _CODE_STRAT:
        raise ConfigError(f"reserved strategy code {scode:#05b}")
    if kernel == 0:
        raise ConfigError("kernel size field 0 is reserved")
    n = uimm & 0b111
    if n == 0:
        raise ConfigError("stage parameter N = 0 is reserved")
    return VsaCsr(_CODE_PREC[pcode], kernel, _CODE_STRAT[scode], n, ((uimm >> 3) & 0b11) + 1)


# --------------------------------------------------------------------------
# Bit-level encoding
# --------------------------------------------------------------------------

OPC_CUSTOM0 = 0x0B
OPC_OPV = 0x57
OPC_LOAD_FP = 0x07
OPC_STORE_FP = 0x27

_CUSTOM_FUNCT3 = {Mnemonic.VSACFG: 0, Mnemonic.VSALD: 1, Mnemonic.VSAM: 2, Mnemonic.VSAC: 3}
_FUNCT3_CUSTOM = {v: k for k, v in _CUSTOM_FUNCT3.items()}
_VSALD_WIDTH = {16: 0b00, 8: 0b01, 4: 0b10}
_WIDTH_VSALD = {v: k for k, v in _VSALD_WIDTH.items()}
# RVV unit-stride memory width field
_MEM_WIDTH = {8: 0b000, 16: 0b101, 32: 0b110}
_WIDTH_MEM = {v: k for k, v in _MEM_WIDTH.items()}
_VLE_WIDTHS = (8, 16)
_VSE_WIDTHS = (8, 16, 32)
VMACC_FUNCT6 = 0b101101
OPMVV = 0b010
OPCFG = 0b111

_USED_FIELDS = {
    Mnemonic.VSACFG: {"rd", "zimm", "uimm"},
    Mnemonic.VSALD: {"vd", "rs1", "width"},
    Mnemonic.VSAM: {"vd", "vs1", "vs2"},
    Mnemonic.VSAC: {"vd", "vs1", "vs2"},
    Mnemonic.VSETVLI: {"rd", "rs1", "zimm"},
    Mnemonic.VLE: {"vd", "rs1", "width"},
    Mnemonic.VSE: {"vd", "rs1", "width"},
    Mnemonic.VMACC: {"vd", "vs1", "vs2"},
}
_FIELD_BITS = {"rd": 5, "rs1": 5, "vd": 5, "vs1": 5, "vs2": 5, "zimm": 9, "uimm": 5}


def _check_fields(instr: Instruction) -> None:
    used = _USED_FIELDS[instr.mnemonic]
    for name, bits in _FIELD_BITS.items():
        value = getattr(instr, name)
        if not isinstance(value, int) or value < 0 or value >= 1 << bits:
            raise EncodingError(name, value)
        if name not in used and value != 0:
            raise EncodingError(name, value, f"field {name!r} unused by {instr.mnemonic.value} must be 0")
    m = instr.mnemonic
    if m is Mnemonic.VSALD and instr.width not in _VSALD_WIDTH:
        raise EncodingError("width", instr.width)
    elif m is Mnemonic.VLE and instr.width not in _VLE_WIDTHS:
        raise EncodingError("width", instr.width)
    elif m is Mnemonic.VSE and instr.width not in _VSE_WIDTHS:
        raise EncodingError("width", instr.width)
    elif "width" not in used and instr.width != 0:
        raise EncodingError("width", instr.width)
    if m is Mnemonic.VSETVLI and instr.zimm >= 1 << 8:
        raise EncodingError("zimm", instr.zimm, "vtype uses zimm[7:0] only")


def encode_instruction(instr: Instruction) -> int:
    _check_fields(instr)
    m = instr.mnemonic
    if m.is_custom:
        word = OPC_CUSTOM0 | (_CUSTOM_FUNCT3[m] << 12)
        if m is Mnemonic.VSACFG:
            word |= (instr.rd << 7) | (instr.uimm << 15) | (instr.zimm << 20)
        elif m is Mnemonic.VSALD:
            word |= (instr.vd << 7) | (instr.rs1 << 15) | (_VSALD_WIDTH[instr.width] << 25)
        else:
            word |= (instr.vd << 7) | (instr.vs1 << 15) | (instr.vs2 << 20)
        return word
    if m is Mnemonic.VSETVLI:
        return OPC_OPV | (instr.rd << 7) | (OPCFG << 12) | (instr.rs1 << 15) | (instr.zimm << 20)
    if m is Mnemonic.VLE or m is Mnemonic.VSE:
        opc = OPC_LOAD_FP if m is Mnemonic.VLE else OPC_STORE_FP
        return opc | (instr.vd << 7) | (_MEM_WIDTH[instr.width] << 12) | (instr.rs1 << 15) | (1 << 25)
    # vmacc.vv vd, vs1, vs2
    return (OPC_OPV | (instr.vd << 7) | (OPMVV << 12) | (instr.vs1 << 15) | (instr.vs2 << 20)
            | (1 << 25) | (VMACC_FUNCT6 << 26))


def _bits(word: int, hi: int, lo: int) -> int:
    return (word >> lo) & ((1 << (hi - lo + 1)) - 1)


def decode_instruction(word: int) -> Instruction:
    if not 0 <= word < 1 << 32:
        raise IllegalInstruction(word & 0xFFFFFFFF, "not a 32-bit word")
    opcode = word & 0x7F
    rd = _bits(word, 11, 7)
    funct3 = _bits(word, 14, 12)
    rs1 = _bits(word, 19, 15)
    rs2 = _bits(word, 24, 20)
    if opcode == OPC_CUSTOM0:
        m = _FUNCT3_CUSTOM.get(funct3)
        if m is None:
            raise IllegalInstruction(word, "reserved custom-0 funct3")
        if m is Mnemonic.VSACFG:
            if _bits(word, 31, 29):
                raise IllegalInstruction(word, "reserved bits set")
            return Instruction(m, rd=rd, uimm=rs1, zimm=_bits(word, 28, 20))
        if m is Mnemonic.VSALD:
            code = _bits(word, 26, 25)
            if code not in _WIDTH_VSALD or _bits(word, 31, 27) or rs2:
                raise IllegalInstruction(word, "bad vsald width or reserved bits")
            return Instruction(m, vd=rd, rs1=rs1, width=_WIDTH_VSALD[code])
        if _bits(word, 31, 25):
            raise IllegalInstruction(word, "reserved bits set")
        return Instruction(m, vd=rd, vs1=rs1, vs2=rs2)
    if opcode == OPC_OPV:
        if funct3 == OPCFG and not _bits(word, 31, 31):
            zimm = _bits(word, 30, 20)
            if zimm >= 1 << 8:
                raise IllegalInstruction(word, "unsupported vtype bits")
            return Instruction(Mnemonic.VSETVLI, rd=rd, rs1=rs1, zimm=zimm)
        if funct3 == OPMVV and _bits(word, 31, 26) == VMACC_FUNCT6 and _bits(word, 25, 25):
            return Instruction(Mnemonic.VMACC, vd=rd, vs1=rs1, vs2=rs2)
        raise IllegalInstruction(word, "unsupported OP-V instruction")
    if opcode in (OPC_LOAD_FP, OPC_STORE_FP):
        m = Mnemonic.VLE if opcode == OPC_LOAD_FP else Mnemonic.VSE
        width = _WIDTH_MEM.get(funct3)
        allowed = _VLE_WIDTHS if m is Mnemonic.VLE else _VSE_WIDTHS
        if width not in allowed or _bits(word, 31, 26) or not _bits(word, 25, 25) or rs2:
            raise IllegalInstruction(word, "only unmasked unit-stride accesses are supported")
        return Instruction(m, vd=rd, rs1=rs1, width=width)
    raise IllegalInstruction(word, "unknown opcode")


# --------------------------------------------------------------------------
# vtype helpers for vsetvli
# --------------------------------------------------------------------------

_SEW_CODE = {8: 0, 16: 1, 32: 2, 64: 3}
_LMUL_CODE = {1: 0, 2: 1, 4: 2, 8: 3}


def encode_vtype(sew: int, lmul: int = 1) -> int:
    try:
        return (_SEW_CODE[sew] << 3) | _LMUL_CODE[lmul]
    except KeyError:
        raise EncodingError("zimm", 0, f"unsupported vtype e{sew},m{lmul}") from None


def decode_vtype(zimm: int) -> tuple[int, int]:
    sew_code = (zimm >> 3) & 0b111
    lmul_code = zimm & 0b111
    if sew_code > 3 or lmul_code > 3:
        raise ConfigError(f"unsupported vtype {zimm:#x}")
    return 8 << sew_code, 1 << lmul_code


# --------------------------------------------------------------------------
# Assembler / disassembler
# --------------------------------------------------------------------------

ABI_NAMES = {
    "zero": 0, "ra": 1, "sp": 2, "gp": 3, "tp": 4, "t0": 5, "t1": 6, "t2": 7,
    "s0": 8, "fp": 8, "s1": 9, "t3": 28, "t4": 29, "t5": 30, "t6": 31,
}
ABI_NAMES.update({f"a{i}": 10 + i for i in range(8)})
ABI_NAMES.update({f"s{i}": 16 + i for i in range(2, 12)})


@dataclass
class Program:
    """Straight-line instruction list plus host-side side tables.

    ``blocks`` maps an arithmetic instruction's index to the stage block that
    describes its multi-stage work; ``xwrites`` maps an instruction index to
    scalar-register values the host core writes before that instruction
    issues (addresses and AVLs are pre-resolved by the host).
    """

    instructions: list[Instruction] = field(default_factory=list)
    blocks: dict = field(default_factory=dict)
    xwrites: dict[int, dict[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)

    def append(self, instr: Instruction, xwrite: dict[int, int] | None = None, block=None) -> int:
        idx = len(self.instructions)
        self.instructions.append(instr)
        if xwrite:
            self.xwrites[idx] = dict(xwrite)
        if block is not None:
            self.blocks[idx] = block
        return idx

    def encode(self) -> list[int]:
        return [encode_instruction(i) for i in self.instructions]

    def arithmetic_count(self) -> int:
        return sum(1 for i in self.instructions if i.mnemonic.is_arithmetic)

    def vector_registers(self) -> set[int]:
        regs: set[int] = set()
        for i in self.instructions:
            used = _USED_FIELDS[i.mnemonic]
            for name in ("vd", "vs1", "vs2"):
                if name in used:
                    regs.add(getattr(i, name))
        return regs


_TOKEN_SPLIT = re.compile(r"\s*,\s*")


def _parse_int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AssemblyError(line, f"bad immediate {tok!r}") from None


def _parse_xreg(tok: str, line: int) -> int:
    t = tok.strip().lower()
    if t in ABI_NAMES:
        return ABI_NAMES[t]
    m = re.fullmatch(r"x(\d+)", t)
    if not m:
        raise AssemblyError(line, f"expected scalar register, got {tok!r}")
    n = int(m.group(1))
    if n > 31:
        raise AssemblyError(line, f"register out of range: {tok}")
    return n


def _parse_vreg(tok: str, line: int) -> int:
    m = re.fullmatch(r"v(\d+)", tok.strip().lower())
    if not m:
        raise AssemblyError(line, f"expected vector register, got {tok!r}")
    n = int(m.group(1))
    if n > 31:
        raise AssemblyError(line, f"register out of range: {tok}")
    return n


def _parse_mem(tok: str, line: int) -> int:
    m = re.fullmatch(r"\(\s*([a-z0-9]+)\s*\)", tok.strip().lower())
    if not m:
        raise AssemblyError(line, f"expected (reg) address operand, got {tok!r}")
    return _parse_xreg(m.group(1), line)


def _expect(ops: list[str], n: int, line: int, name: str) -> None:
    if len(ops) != n:
        raise AssemblyError(line, f"{name} takes {n} operands, got {len(ops)}")


def assemble_line(text: str, line: int = 1) -> Instruction | None:
    code = text.split("#", 1)[0].strip()
    if not code:
        return None
    parts = code.split(None, 1)
    mn = parts[0].lower()
    ops = _TOKEN_SPLIT.split(parts[1].strip()) if len(parts) > 1 else []
    if mn == "vsacfg":
        _expect(ops, 3, line, mn)
        instr = Instruction(Mnemonic.VSACFG, rd=_parse_xreg(ops[0], line),
                            zimm=_parse_int(ops[1], line), uimm=_parse_int(ops[2], line))
    elif m := re.fullmatch(r"vsald(16|8|4)\.v", mn):
        _expect(ops, 2, line, mn)
        instr = Instruction(Mnemonic.VSALD, vd=_parse_vreg(ops[0], line),
                            rs1=_parse_mem(ops[1], line), width=int(m.group(1)))
    elif mn in ("vsam.vv", "vsac.vv", "vmacc.vv"):
        _expect(ops, 3, line, mn)
        mnem = {"vsam.vv": Mnemonic.VSAM, "vsac.vv": Mnemonic.VSAC, "vmacc.vv": Mnemonic.VMACC}[mn]
        instr = Instruction(mnem, vd=_parse_vreg(ops[0], line), vs1=_parse_vreg(ops[1], line),
                            vs2=_parse_vreg(ops[2], line))
    elif mn == "vsetvli":
        if len(ops) != 4:
            raise AssemblyError(line, "vsetvli takes rd, rs1, eX, mY")
        sew = re.fullmatch(r"e(\d+)", ops[2].strip().lower())
        lmul = re.fullmatch(r"m(\d+)", ops[3].strip().lower())
        if not sew or not lmul:
            raise AssemblyError(line, f"bad vtype {ops[2]},{ops[3]}")
        try:
            vtype = encode_vtype(int(sew.group(1)), int(lmul.group(1)))
        except EncodingError as e:
            raise AssemblyError(line, str(e)) from None
        instr = Instruction(Mnemonic.VSETVLI, rd=_parse_xreg(ops[0], line),
                            rs1=_parse_xreg(ops[1], line), zimm=vtype)
    elif m := re.fullmatch(r"(vle|vse)(\d+)\.v", mn):
        _expect(ops, 2, line, mn)
        width = int(m.group(2))
        mnem = Mnemonic.VLE if m.group(1) == "vle" else Mnemonic.VSE
        if width not in (_VLE_WIDTHS if mnem is Mnemonic.VLE else _VSE_WIDTHS):
            raise AssemblyError(line, f"unsupported element width in {mn}")
        instr = Instruction(mnem, vd=_parse_vreg(ops[0], line), rs1=_parse_mem(ops[1], line), width=width)
    else:
        raise AssemblyError(line, f"unknown mnemonic {parts[0]!r}")
    try:
        _check_fields(instr)
    except EncodingError as e:
        raise AssemblyError(line, str(e)) from None
    return instr


def assemble(text: str) -> Program:
    prog = Program()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        instr = assemble_line(raw, lineno)
        if instr is not None:
            prog.append(instr)
    return prog


def disassemble_one(i: Instruction) -> str:
    m = i.mnemonic
    if m is Mnemonic.VSACFG:
        return f"vsacfg x{i.rd}, {i.zimm:#x}, {i.uimm}"
    if m is Mnemonic.VSALD:
        return f"vsald{i.width}.v v{i.vd}, (x{i.rs1})"
    if m in (Mnemonic.VSAM, Mnemonic.VSAC, Mnemonic.VMACC):
        return f"{m.value}.vv v{i.vd}, v{i.vs1}, v{i.vs2}"
    if m is Mnemonic.VSETVLI:
        sew, lmul = decode_vtype(i.zimm)
        return f"vsetvli x{i.rd}, x{i.rs1}, e{sew}, m{lmul}"
    return f"{m.value}{i.width}.v v{i.vd}, (x{i.rs1})"


def disassemble(program: Program | Iterable[Instruction]) -> str:
    instrs = program.instructions if isinstance(program, Program) else program
    return "".join(disassemble_one(i) + "\n" for i in instrs)


def vsacfg(csr: VsaCsr, rd: int = 0) -> Instruction:
    zimm, uimm = encode_csr(csr)
    return Instruction(Mnemonic.VSACFG, rd=rd, zimm=zimm, uimm=uimm)


def with_fields(instr: Instruction, **kw) -> Instruction:
    return replace(instr, **kw)
