"""Four-stage (ID/IS/EX/CO) vector machine with per-lane VRFs and tensor cores."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .isa import (ConfigError, Instruction, Mnemonic, Precision, Program, VsaCsr,
                  decode_csr, decode_vtype)
from .memsys import AccessMode, ExternalMemory, MemoryFault, Vrf, VrfFault
from .mptu import TensorCore, wrap32

LEGAL_LANES = (2, 4, 8)
LEGAL_TILES = (2, 4, 8)
UNITS = ("MPTU", "ALU", "VLDU", "VSU")


class ExecutionError(Exception):
    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(f"instruction {index}: {message}")


@dataclass(frozen=True)
class BaselineParams:
    """Cost model of the reference RVV machine (no tensor unit)."""

    lanes: int = 4
    datapath_bits_per_lane: int = 64
    per_instruction_startup_cycles: int = 6
    supports_int4: bool = False

    def elems_per_lane(self, sew: int | Precision) -> int:
        return max(1, self.datapath_bits_per_lane // getattr(sew, "bits", sew))

    def peak_macs_per_cycle(self, sew: int | Precision) -> int:
        return self.lanes * self.elems_per_lane(sew)


@dataclass(frozen=True)
class MachineConfig:
    lanes: int = 4
    tile_r: int = 2
    tile_c: int = 2
    vlen_bits: int = 4096
    vrf_bytes_per_lane: int | None = None
    bus_bytes_per_cycle: int = 64
    queue_depth: int = 2
    mem_bytes: int = 64 * 1024 * 1024
    baseline: BaselineParams | None = None

    def __post_init__(self):
        if self.vrf_bytes_per_lane is None:
            object.__setattr__(self, "vrf_bytes_per_lane", 32 * self.vlen_bits // 8)
        lanes = self.baseline.lanes if self.baseline else self.lanes
        if lanes not in LEGAL_LANES:
            raise ConfigError(f"lanes must be one of {LEGAL_LANES}, got {lanes}")
        for name in ("tile_r", "tile_c"):
            if getattr(self, name) not in LEGAL_TILES:
                raise ConfigError(f"{name} must be one of {LEGAL_TILES}, got {getattr(self, name)}")
        if self.vlen_bits <= 0 or self.vlen_bits % 64:
            raise ConfigError(f"vlen_bits must be a positive multiple of 64, got {self.vlen_bits}")
        if self.vrf_bytes_per_lane != 32 * self.vlen_bits // 8:
            raise ConfigError("vrf_bytes_per_lane must equal 32 * vlen_bits / 8")
        if self.bus_bytes_per_cycle <= 0 or self.queue_depth < 1:
            raise ConfigError("bus width and queue depth must be positive")

    @property
    def reg_bytes(self) -> int:
        return self.vlen_bits // 8

    @property
    def n_lanes(self) -> int:
        return self.baseline.lanes if self.baseline else self.lanes

    @property
    def total_pes(self) -> int:
        return self.lanes * self.tile_r * self.tile_c

    def peak_macs_per_cycle(self, precision: Precision) -> int:
        if self.baseline:
            return self.baseline.peak_macs_per_cycle(precision.bits)
        return self.lanes * self.tile_r * self.tile_c * precision.pp

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class StageBlock:
    """Stage descriptors of one multi-stage arithmetic instruction.

    Addresses are lane-local VRF byte offsets, -1 meaning "absent" (zero
    operand, no accumulation read, or no write-back).
    """

    in_addr: np.ndarray   # (S, lanes, tile_r) int32
    w_addr: np.ndarray    # (S, lanes, tile_c) int32
    acc_addr: np.ndarray  # (S, lanes, tile_r, tile_c) int32
    wb_addr: np.ndarray   # (S, lanes, tile_r, tile_c) int32
    drain: np.ndarray     # (S,) uint8
    final: np.ndarray     # (S,) uint8: write-backs of this stage are final outputs
    valid_macs: int = 0
    keep: bool = False    # keep PP sub-results separate (depth-wise) instead of reducing

    @property
    def n_stages(self) -> int:
        return int(self.drain.shape[0])

    def request_flags(self) -> np.ndarray:
        s = self.n_stages
        req = np.ones(s, dtype=np.uint8)
        if s > 1:
            same_in = np.all(self.in_addr[1:] == self.in_addr[:-1], axis=(1, 2))
            same_w = np.all(self.w_addr[1:] == self.w_addr[:-1], axis=(1, 2))
            req[1:] = ~(same_in & same_w)
        return req

    def acc_flags(self) -> np.ndarray:
        return np.any(self.acc_addr >= 0, axis=(1, 2, 3)).astype(np.uint8)

    def partial_writes(self) -> int:
        drained = (self.drain == 1) & (self.final == 0)
        if not drained.any():
            return 0
        return int(np.count_nonzero(self.wb_addr[drained] >= 0))

    def _regs(self, arrays, reg_bytes: int, span: int) -> set[int]:
        parts = []
        for a in arrays:
            v = a[a >= 0]
            parts += [v // reg_bytes, (v + span - 1) // reg_bytes]
        return set(np.unique(np.concatenate(parts)).tolist()) if parts else set()

    def read_regs(self, reg_bytes: int, operand_bytes: int, pp: int) -> set[int]:
        acc_span = 4 * pp if self.keep else 4
        return self._regs([self.in_addr, self.w_addr], reg_bytes, operand_bytes) | \
            self._regs([self.acc_addr], reg_bytes, acc_span)

    def write_regs(self, reg_bytes: int, pp: int) -> set[int]:
        return self._regs([self.wb_addr], reg_bytes, 4 * pp if self.keep else 4)


@dataclass
class Metrics:
    cycles: int = 0
    instructions_total: int = 0
    arithmetic_instructions: int = 0
    distinct_vector_registers: int = 0
    ext_bytes_read: int = 0
    ext_bytes_written: int = 0
    valid_ops: int = 0
    macs_performed: int = 0
    partial_writes: int = 0

    @property
    def ext_bytes(self) -> int:
        return self.ext_bytes_read + self.ext_bytes_written

    @property
    def ops_per_cycle(self) -> float:
        return self.valid_ops / self.cycles if self.cycles else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ext_bytes"] = self.ext_bytes
        d["ops_per_cycle"] = self.ops_per_cycle
        return d


@dataclass
class LaneState:
    vrf: Vrf
    mptu: TensorCore


@dataclass
class _InFlight:
    index: int
    unit: str | None
    done: int
    reads: frozenset
    writes: frozenset


@dataclass
class PipelineSnapshot:
    cycle: int
    id: int | None = None
    is_: int | None = None
    ex: dict = field(default_factory=dict)
    co: int | None = None

    @property
    def idle(self) -> bool:
        return self.id is None and self.is_ is None and not self.ex and self.co is None


@dataclass
class _Decoded:
    index: int
    instr: Instruction
    csr: VsaCsr
    ready: int
    fp: tuple | None = None  # cached (reads, writes); vl cannot change while it waits


class Machine:
    def __init__(self, config: MachineConfig, mem: ExternalMemory | None = None):
        self.config = config
        L = config.n_lanes
        self.lanes_n = L
        self.vrf = np.zeros((L, config.vrf_bytes_per_lane), dtype=np.uint8)
        self.acc = np.zeros((L, config.tile_r, config.tile_c, 16), dtype=np.int64)
        self.lanes = [LaneState(Vrf(config.vlen_bits, self.vrf[l]),
                                TensorCore(config.tile_r, config.tile_c, acc=self.acc[l]))
                      for l in range(L)]
        self.ext_mem = mem if mem is not None else ExternalMemory(config.mem_bytes)
        self.csr = VsaCsr()
        self.configured = False
        self.vl = 0
        self.sew = 8
        self.lmul = 1
        self.x = [0] * 32
        self.cycle = 0
        self.metrics = Metrics()
        self.trace: list[tuple[int, str, int, str, str]] | None = None
        self._mptu_precision: Precision | None = None
        self._reset_pipeline(Program())

    # ------------------------------------------------------------------
    # program loading / pipeline state
    # ------------------------------------------------------------------

    def _reset_pipeline(self, program: Program) -> None:
        self.program = program
        self.pc = 0
        self.is_slot: _Decoded | None = None
        self.inflight: list[_InFlight] = []
        self.unit_free = {u: 0 for u in UNITS}
        self.committed = 0
        self.last_commit = -1

    def load(self, program: Program) -> None:
        self._reset_pipeline(program)
        self.cycle = 0

    @property
    def done(self) -> bool:
        return self.committed == len(self.program)

    def _emit(self, stage: str, index: int, unit: str = "") -> None:
        if self.trace is not None:
            self.trace.append((self.cycle, stage, index, self.program.instructions[index].mnemonic.value, unit))

    # ------------------------------------------------------------------
    # cycle stepping
    # ------------------------------------------------------------------

    def step(self) -> PipelineSnapshot:
        t = self.cycle
        snap = PipelineSnapshot(cycle=t)
        # CO: in order, one per cycle
        if self.inflight and self.inflight[0].done < t:
            entry = self.inflight.pop(0)
            self.committed += 1
            self.last_commit = t
            snap.co = entry.index
            self._emit("CO", entry.index, entry.unit or "")
        # EX: report occupancy
        for e in self.inflight:
            if e.unit is not None and e.done >= t and e.index != snap.co:
                snap.ex[e.unit] = e.index
        # IS
        if self.is_slot is not None and self.is_slot.ready <= t:
            d = self.is_slot
            unit = _unit_of(d.instr)
            if self.unit_free[unit] <= t and not self._hazard(d):
                reads, writes, latency = self._execute(d)
                done = t + latency
                self.unit_free[unit] = done
                self.inflight.append(_InFlight(d.index, unit, done, frozenset(reads), frozenset(writes)))
                self.is_slot = None
                snap.is_ = d.index
                self._emit("IS", d.index, unit)
        # ID
        if self.is_slot is None and self.pc < len(self.program):
            idx = self.pc
            instr = self.program.instructions[idx]
            for reg, value in self.program.xwrites.get(idx, {}).items():
                if reg:
                    self.x[reg] = int(value)
            self.pc += 1
            snap.id = idx
            self._emit("ID", idx)
            if instr.mnemonic in (Mnemonic.VSACFG, Mnemonic.VSETVLI):
                self._configure(idx, instr)
                self.inflight.append(_InFlight(idx, None, t, frozenset(), frozenset()))
            else:
                if instr.mnemonic in (Mnemonic.VSAM, Mnemonic.VSAC) and not self.configured:
                    raise ExecutionError(idx, "arithmetic custom instruction before any VSACFG")
                self.is_slot = _Decoded(idx, instr, self.csr, t + 1)
        self.cycle = t + 1
        return snap

    def _next_event(self) -> int:
        """Earliest cycle after the current one at which the pipeline can change."""
        cands = []
        if self.inflight:
            cands.append(self.inflight[0].done + 1)
        if self.is_slot is not None:
            cands.append(max(self.is_slot.ready, self.unit_free[_unit_of(self.is_slot.instr)]))
        elif self.pc < len(self.program):
            cands.append(self.cycle)
        return max(self.cycle, min(cands)) if cands else self.cycle

    def run_loaded(self) -> Metrics:
        while not self.done:
            snap = self.step()
            if snap.co is None and snap.is_ is None and snap.id is None:
                self.cycle = self._next_event()
        return self._finish()

    def _finish(self) -> Metrics:
        m = self.metrics
        m.cycles = self.last_commit + 1
        m.instructions_total = len(self.program)
        m.arithmetic_instructions = self.program.arithmetic_count()
        m.distinct_vector_registers = len(self.program.vector_registers())
        m.ext_bytes_read = self.ext_mem.bytes_read
        m.ext_bytes_written = self.ext_mem.bytes_written
        return m

    # ------------------------------------------------------------------
    # hazards
    # ------------------------------------------------------------------

    def _hazard(self, d: _Decoded) -> bool:
        if d.fp is None:
            d.fp = self._footprint(d)
        reads, writes = d.fp
        for e in self.inflight:
            if e.writes & (reads | writes) or e.reads & writes:
                return True
        return False

    def _footprint(self, d: _Decoded) -> tuple[set[int], set[int]]:
        i = d.instr
        m = i.mnemonic
        cfg = self.config
        if m in (Mnemonic.VSAM, Mnemonic.VSAC):
            blk = self.program.blocks.get(d.index)
            if blk is None:
                return {i.vs1, i.vs2, i.vd}, {i.vd}
            p = d.csr.precision
            return blk.read_regs(cfg.reg_bytes, p.operand_bytes, p.pp), blk.write_regs(cfg.reg_bytes, p.pp)
        if m is Mnemonic.VSALD:
            n = self._group(self.vl * self.sew // 8)
            return set(), set(range(i.vd, i.vd + n))
        if m is Mnemonic.VLE:
            n = self._group(math.ceil(self.vl / self.lanes_n) * i.width // 8)
            return set(), set(range(i.vd, i.vd + n))
        if m is Mnemonic.VSE:
            n = self._group(math.ceil(self.vl / self.lanes_n) * i.width // 8)
            return set(range(i.vd, i.vd + n)), set()
        if m is Mnemonic.VMACC:
            per_lane = math.ceil(self.vl / self.lanes_n)
            src = self._group(per_lane * self.sew // 8)
            dst = self._group(per_lane * 4)
            reads = set(range(i.vs1, i.vs1 + src)) | set(range(i.vs2, i.vs2 + src)) | set(range(i.vd, i.vd + dst))
            return reads, set(range(i.vd, i.vd + dst))
        return set(), set()

    def _group(self, per_lane_bytes: int) -> int:
        return max(1, math.ceil(per_lane_bytes / self.config.reg_bytes))

    # ------------------------------------------------------------------
    # functional execution
    # ------------------------------------------------------------------

    def _configure(self, idx: int, instr: Instruction) -> None:
        if instr.mnemonic is Mnemonic.VSACFG:
            try:
                self.csr = decode_csr(instr.zimm, instr.uimm)
            except ConfigError as e:
                raise ExecutionError(idx, str(e)) from None
            self.configured = True
            if instr.rd:
                self.x[instr.rd] = instr.zimm
            return
        try:
            sew, lmul = decode_vtype(instr.zimm)
        except ConfigError as e:
            raise ExecutionError(idx, str(e)) from None
        vlmax = lmul * self.config.vlen_bits * self.lanes_n // sew
        if instr.rs1 != 0:
            avl = self.x[instr.rs1]
        elif instr.rd != 0:
            avl = vlmax
        else:
            avl = self.vl
        self.sew, self.lmul = sew, lmul
        self.vl = min(avl, vlmax)
        if instr.rd:
            self.x[instr.rd] = self.vl

    def _execute(self, d: _Decoded) -> tuple[set[int], set[int], int]:
        reads, writes = d.fp if d.fp is not None else self._footprint(d)
        m = d.instr.mnemonic
        try:
            if m in (Mnemonic.VSALD, Mnemonic.VLE):
                latency = vldu_load(self, d.instr)
            elif m is Mnemonic.VSE:
                latency = self._store(d.instr)
            elif m is Mnemonic.VMACC:
                latency = self._vmacc(d.instr)
            else:
                latency = self._tensor_op(d)
        except (MemoryFault, VrfFault) as e:
            raise ExecutionError(d.index, str(e)) from e
        return reads, writes, max(1, latency)

    def _lane_bytes_ok(self, reg: int, nbytes: int) -> None:
        if reg * self.config.reg_bytes + nbytes > self.config.vrf_bytes_per_lane:
            raise VrfFault(f"access of {nbytes} bytes from v{reg} runs past the VRF")

    def _baseline_cost(self, elems: int) -> int:
        b = self.config.baseline
        return b.per_instruction_startup_cycles + math.ceil(elems / (b.lanes * b.elems_per_lane(self.sew)))

    def _bus_cost(self, nbytes: int) -> int:
        return math.ceil(nbytes / self.config.bus_bytes_per_cycle)

    def _store(self, instr: Instruction) -> int:
        L = self.lanes_n
        eb = instr.width // 8
        n = self.vl
        if n == 0:
            return 1
        per_lane = math.ceil(n / L)
        self._lane_bytes_ok(instr.vd, per_lane * eb)
        base = instr.vd * self.config.reg_bytes
        i = np.arange(n)
        idx = base + (i // L)[:, None] * eb + np.arange(eb)
        payload = self.vrf[(i % L)[:, None], idx].ravel()
        self.ext_mem.write(self.x[instr.rs1], payload, self.cycle)
        if self.config.baseline:
            return self._baseline_cost(n)
        return self._bus_cost(payload.size)

    def _vmacc(self, instr: Instruction) -> int:
        L = self.lanes_n
        n = self.vl
        if n == 0:
            return 1
        eb = self.sew // 8
        per_lane = math.ceil(n / L)
        for r in (instr.vs1, instr.vs2):
            self._lane_bytes_ok(r, per_lane * eb)
        self._lane_bytes_ok(instr.vd, per_lane * 4)
        rb = self.config.reg_bytes
        i = np.arange(n)
        lane = i % L
        off = i // L

        def elems(reg):
            idx = reg * rb + off[:, None] * eb + np.arange(eb)
            raw = self.vrf[lane[:, None], idx].copy()
            return raw.view(f"<i{eb}")[:, 0].astype(np.int64)

        a, b = elems(instr.vs1), elems(instr.vs2)
        acc_idx = instr.vd * rb + off[:, None] * 4 + np.arange(4)
        acc = self.vrf[lane[:, None], acc_idx].copy().view("<i4")[:, 0].astype(np.int64)
        res = wrap32(acc + a * b).astype("<i4")
        self.vrf[lane[:, None], acc_idx] = res.view(np.uint8).reshape(-1, 4)
        self.metrics.macs_performed += n
        self.metrics.valid_ops += 2 * n
        if self.config.baseline:
            return self._baseline_cost(n)
        return math.ceil(n / (L * max(1, 64 // self.sew)))

    def _tensor_op(self, d: _Decoded) -> int:
        if self.config.baseline:
            raise ExecutionError(d.index, "baseline machine has no tensor unit")
        cfg = self.config
        p = d.csr.precision
        blk = self.program.blocks.get(d.index)
        if blk is None:
            blk = default_block(d.instr, cfg, p, self.lanes_n)
            counted = None
        else:
            counted = blk.valid_macs
        for arr, span in ((blk.in_addr, p.operand_bytes), (blk.w_addr, p.operand_bytes),
                          (blk.acc_addr, 4 * (p.pp if blk.keep else 1)),
                          (blk.wb_addr, 4 * (p.pp if blk.keep else 1))):
            if arr.size and (arr.max() + span > cfg.vrf_bytes_per_lane):
                raise VrfFault("stage operand address outside VRF")
        macs = kernels.exec_stages(self.vrf, self.acc, blk.in_addr, blk.w_addr, blk.acc_addr, blk.wb_addr,
                                   blk.drain, p.bits, p.pp, blk.keep)
        self.metrics.macs_performed += macs
        self.metrics.valid_ops += 2 * (macs if counted is None else counted)
        self.metrics.partial_writes += blk.partial_writes()
        cycles = kernels.stage_timing(blk.request_flags(), blk.acc_flags(), blk.drain, cfg.tile_c)
        cycles += cfg.tile_r + cfg.tile_c - 2
        if self._mptu_precision is not None and self._mptu_precision is not p:
            cycles += 1  # precision reconfiguration of the PE array
        self._mptu_precision = p
        return cycles

    # ------------------------------------------------------------------

    def write_trace(self, path) -> None:
        with open(path, "w") as f:
            f.write("cycle,stage,instr_index,mnemonic,unit\n")
            for row in self.trace or []:
                f.write(",".join(str(v) for v in row) + "\n")


def _unit_of(instr: Instruction) -> str:
    m = instr.mnemonic
    if m in (Mnemonic.VSAM, Mnemonic.VSAC):
        return "MPTU"
    if m in (Mnemonic.VSALD, Mnemonic.VLE):
        return "VLDU"
    if m is Mnemonic.VSE:
        return "VSU"
    return "ALU"


def default_block(instr: Instruction, cfg: MachineConfig, p: Precision, lanes: int) -> StageBlock:
    """Single-stage outer product over whole registers for a descriptor-less VSAM/VSAC:
    PE row r reads operand r of vs1, column c reads operand c of vs2, and the
    result is accumulated onto vd (one int32 per PE, or PP int32 for VSAC)."""
    R, C = cfg.tile_r, cfg.tile_c
    rb = cfg.reg_bytes
    ob = p.operand_bytes
    keep = instr.mnemonic is Mnemonic.VSAC
    slot = 4 * (p.pp if keep else 1)
    in_addr = np.broadcast_to(instr.vs1 * rb + np.arange(R) * ob, (1, lanes, R)).astype(np.int32)
    w_addr = np.broadcast_to(instr.vs2 * rb + np.arange(C) * ob, (1, lanes, C)).astype(np.int32)
    out = (instr.vd * rb + (np.arange(R)[:, None] * C + np.arange(C)) * slot).astype(np.int32)
    out = np.broadcast_to(out, (1, lanes, R, C)).astype(np.int32)
    return StageBlock(in_addr, w_addr, out.copy(), out.copy(), np.ones(1, np.uint8), np.ones(1, np.uint8),
                      valid_macs=lanes * R * C * p.pp, keep=keep)


def vldu_load(machine: Machine, instr: Instruction) -> int:
    """Functional VSALD/VLE; returns EX cycles.

    VLE stripes ``vl`` elements across lanes (element i to lane i mod lanes);
    VSALD fetches ``vl * SEW`` bits once and writes them to every lane.
    """
    L = machine.lanes_n
    cfg = machine.config
    addr = machine.x[instr.rs1]
    base = instr.vd * cfg.reg_bytes
    if instr.mnemonic is Mnemonic.VSALD:
        nbytes = machine.vl * machine.sew // 8
        machine._lane_bytes_ok(instr.vd, nbytes)
        data = machine.ext_mem.read(addr, nbytes, AccessMode.BROADCAST, machine.cycle)
        machine.vrf[:, base:base + nbytes] = data[None, :]
        return machine._bus_cost(nbytes)
    eb = instr.width // 8
    n = machine.vl
    nbytes = n * eb
    per_lane = math.ceil(n / L)
    machine._lane_bytes_ok(instr.vd, per_lane * eb)
    data = machine.ext_mem.read(addr, nbytes, AccessMode.SEQUENTIAL, machine.cycle)
    if n:
        i = np.arange(n)
        idx = base + (i // L)[:, None] * eb + np.arange(eb)
        machine.vrf[(i % L)[:, None], idx] = data.reshape(n, eb)
    if cfg.baseline:
        return machine._baseline_cost(n)
    return machine._bus_cost(nbytes)


def new_machine(config: MachineConfig, mem: ExternalMemory | None = None) -> Machine:
    return Machine(config, mem)


def run(machine: Machine, program: Program, ext_image: dict[int, bytes] | bytes | None = None,
        trace: bool = False) -> Metrics:
    """Load ``ext_image`` ({address: bytes} or bytes at 0), execute ``program`` to completion."""
    if ext_image:
        items = ext_image.items() if isinstance(ext_image, dict) else [(0, ext_image)]
        for base, blob in items:
            machine.ext_mem.load_image(blob, base)
    if trace:
        machine.trace = []
    machine.load(program)
    return machine.run_loaded()


def step(machine: Machine) -> PipelineSnapshot:
    return machine.step()
