"""Integer oracles, the baseline vector-machine lowering, the run harness and benchmark suites."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .dataflow import (Kind, OperatorSpec, build_image, decompose_kernel, gather_outputs, legal_strategies,
                       lower, plan, select_strategy)
from .isa import Instruction, Mnemonic, Precision, Program, Strategy, encode_vtype
from .machine import BaselineParams, MachineConfig, Metrics, new_machine, run

__all__ = ["BaselineParams", "UnsupportedPrecision", "SuiteNotFound", "CorrectnessError", "oracle_mm",
           "oracle_mm_kij", "oracle_conv", "oracle_conv_im2col", "im2col", "oracle_mac_count",
           "random_tensors", "baseline_lower", "run_speed", "run_baseline", "compare", "run_entry", "model_suite",
           "suite_names", "random_operator_layers", "RunResult", "ComparisonReport", "SuiteEntry"]


class UnsupportedPrecision(Exception):
    pass


class SuiteNotFound(KeyError):
    pass


class CorrectnessError(AssertionError):
    pass


def wrap32(x: np.ndarray) -> np.ndarray:
    return ((np.asarray(x, np.int64) + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def oracle_mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, np.int64)
    b = np.asarray(b, np.int64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    # products of 16-bit values fit in int64 and so does any sum of < 2^31 of them
    return wrap32(a @ b)


def oracle_mm_kij(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Independent k-outer loop order with wrapping after every accumulate."""
    a = np.asarray(a, np.int64)
    b = np.asarray(b, np.int64)
    if a.shape[1] != b.shape[0]:
        raise ValueError("inner dimensions differ")
    out = np.zeros((a.shape[0], b.shape[1]), np.int64)
    for k in range(a.shape[1]):
        out = wrap32(out + a[:, k:k + 1] * b[k:k + 1, :])
    return out


def oracle_conv(op: OperatorSpec, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Direct convolution: loop over output channel and kernel tap, gather the
    strided input window, accumulate with 32-bit wrap."""
    x = np.asarray(x, np.int64)
    w = np.asarray(w, np.int64)
    if x.shape != op.input_shape or w.shape != op.weight_shape:
        raise ValueError(f"shape mismatch: {x.shape}/{w.shape} vs {op.input_shape}/{op.weight_shape}")
    p, s = op.padding, op.stride
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros(op.output_shape, np.int64)
    ho, wo = op.out_h, op.out_w
    for ky in range(op.kh):
        for kx in range(op.kw):
            win = xp[:, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s]  # (Cin, ho, wo)
            if op.kind is Kind.DWCV:
                out = wrap32(out + win * w[:, ky, kx][:, None, None])
            else:
                for oc in range(op.out_channels):
                    out[oc] = wrap32(out[oc] + np.tensordot(w[oc, :, ky, kx], win, axes=1))
    return out


def im2col(op: OperatorSpec, x: np.ndarray) -> np.ndarray:
    """(Cin*kh*kw, out_h*out_w) patch matrix, row index c*kh*kw + ky*kw + kx."""
    p, s = op.padding, op.stride
    xp = np.pad(np.asarray(x, np.int64), ((0, 0), (p, p), (p, p)))
    ho, wo = op.out_h, op.out_w
    rows = []
    for c in range(op.in_channels):
        for ky in range(op.kh):
            for kx in range(op.kw):
                rows.append(xp[c, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s].ravel())
    return np.stack(rows)


def oracle_conv_im2col(op: OperatorSpec, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    cols = im2col(op, x)
    kk = op.kh * op.kw
    if op.kind is Kind.DWCV:
        c = op.in_channels
        out = np.stack([oracle_mm(w[i].reshape(1, kk), cols[i * kk:(i + 1) * kk])[0] for i in range(c)])
    else:
        out = oracle_mm(np.asarray(w).reshape(op.out_channels, -1), cols)
    return out.reshape(op.output_shape)


def oracle(op: OperatorSpec, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return oracle_mm(x, w) if op.kind is Kind.MM else oracle_conv(op, x, w)


def oracle_mac_count(op: OperatorSpec) -> int:
    """MACs with both operands inside the tensors (padding taps excluded)."""
    if op.kind is Kind.MM:
        return op.M * op.K * op.N
    p, s = op.padding, op.stride
    oy = np.arange(op.out_h) * s - p
    ox = np.arange(op.out_w) * s - p
    vy = sum(int(np.count_nonzero((oy + ky >= 0) & (oy + ky < op.height))) for ky in range(op.kh))
    vx = sum(int(np.count_nonzero((ox + kx >= 0) & (ox + kx < op.width))) for kx in range(op.kw))
    taps = vy * vx
    if op.kind is Kind.DWCV:
        return taps * op.in_channels
    return taps * op.in_channels * op.out_channels


def op_seed(seed: int, op: OperatorSpec) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(json.dumps(op.to_dict(), sort_keys=True).encode())])


def random_tensors(op: OperatorSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    p = op.precision
    x = rng.integers(p.lo, p.hi + 1, size=op.input_shape, dtype=np.int64)
    w = rng.integers(p.lo, p.hi + 1, size=op.weight_shape, dtype=np.int64)
    return x, w


# ---------------------------------------------------------------------------
# baseline lowering
# ---------------------------------------------------------------------------

@dataclass
class BaselineProgram(Program):
    image: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)  # (address, flat output start, count)
    image_bytes: int = 0


def baseline_config(params: BaselineParams | None = None, vlen_bits: int = 4096) -> MachineConfig:
    params = params or BaselineParams()
    return MachineConfig(lanes=params.lanes, vlen_bits=vlen_bits, baseline=params)


class _BaselineEmitter:
    ACC = (0, 4)
    OPS = ((8, 9), (10, 11), (12, 13))

    def __init__(self, cfg: MachineConfig, sew: int):
        self.cfg = cfg
        self.sew = sew
        self.eb = sew // 8
        self.prog = BaselineProgram()
        self.vtype = None
        self.addr = 0
        self.vmax = cfg.vlen_bits * cfg.n_lanes // sew
        self.splats: dict[int, int] = {}
        self.zero_addr = self.alloc(np.zeros(4 * self.vmax, np.uint8).tobytes())
        self.rot = 0
        self.acc_rot = 0

    def alloc(self, blob: bytes) -> int:
        a = self.addr
        self.prog.image[a] = blob
        self.addr = (a + len(blob) + 63) // 64 * 64
        return a

    def alloc_out(self, nbytes: int) -> int:
        a = self.addr
        self.addr = (a + nbytes + 63) // 64 * 64
        return a

    def splat(self, value: int) -> int:
        v = int(value)
        if v not in self.splats:
            self.splats[v] = self.alloc(np.full(self.vmax, v, dtype=f"<i{self.eb}").tobytes())
        return self.splats[v]

    def setvl(self, vl: int, sew: int) -> None:
        for lmul in (1, 2, 4, 8):
            if vl <= lmul * self.cfg.vlen_bits * self.cfg.n_lanes // sew:
                break
        if self.vtype != (vl, sew, lmul):
            self.prog.append(Instruction(Mnemonic.VSETVLI, rd=5, rs1=10, zimm=encode_vtype(sew, lmul)), {10: vl})
            self.vtype = (vl, sew, lmul)

    def strip(self, vl: int, pairs, out_addr: int, out_start: int) -> None:
        """acc = 0; acc += a_j * b_j for each (a_addr, b_addr); store acc."""
        acc = self.ACC[self.acc_rot]
        self.acc_rot ^= 1
        self.setvl(vl, 32)
        self.prog.append(Instruction(Mnemonic.VLE, vd=acc, rs1=11, width=32), {11: self.zero_addr})
        self.setvl(vl, self.sew)
        for a_addr, b_addr in pairs:
            ra, rb = self.OPS[self.rot]
            self.rot = (self.rot + 1) % len(self.OPS)
            self.prog.append(Instruction(Mnemonic.VLE, vd=ra, rs1=11, width=self.sew), {11: a_addr})
            self.prog.append(Instruction(Mnemonic.VLE, vd=rb, rs1=11, width=self.sew), {11: b_addr})
            self.prog.append(Instruction(Mnemonic.VMACC, vd=acc, vs1=ra, vs2=rb))
        self.setvl(vl, 32)
        self.prog.append(Instruction(Mnemonic.VSE, vd=acc, rs1=12, width=32), {12: out_addr})
        self.prog.outputs.append((out_addr, out_start, vl))


def baseline_lower(op: OperatorSpec, params: BaselineParams | None = None, x: np.ndarray | None = None,
                   w: np.ndarray | None = None, cfg: MachineConfig | None = None) -> BaselineProgram:
    """im2col + splat-vector lowering onto the RVV subset (VLE / VMACC / VSE).

    Each output strip is zeroed from a zero region, then accumulates one VMACC
    per reduction element: a VLE of the im2col row (or B row) and a VLE of a
    splat vector holding the matching weight (or A element).  Without tensors
    the image holds zeros; the instruction stream does not depend on values
    except through splat addresses."""
    p = op.precision
    if p is Precision.INT4:
        raise UnsupportedPrecision("the baseline machine has no 4-bit datapath")
    cfg = cfg or baseline_config(params)
    em = _BaselineEmitter(cfg, p.bits)
    dt = f"<i{p.bits // 8}"
    if x is None:
        x = np.zeros(op.input_shape, np.int64)
    if w is None:
        w = np.zeros(op.weight_shape, np.int64)
    x = np.asarray(x, np.int64)
    w = np.asarray(w, np.int64)
    if op.kind is Kind.MM:
        b_addr = em.alloc(w.astype(dt).tobytes())  # B row-major: row k is contiguous
        n_cols = op.N
        for m in range(op.M):
            for s0 in range(0, n_cols, em.vmax):
                vl = min(em.vmax, n_cols - s0)
                pairs = [(b_addr + (k * n_cols + s0) * em.eb, em.splat(x[m, k])) for k in range(op.K)]
                out = em.alloc_out(vl * 4)
                em.strip(vl, pairs, out, m * n_cols + s0)
    else:
        cols = im2col(op, x)
        npix = cols.shape[1]
        kk = op.kh * op.kw
        col_addr = em.alloc(cols.astype(dt).tobytes())
        if op.kind is Kind.DWCV:
            outs = [(c, range(c * kk, (c + 1) * kk), w[c].ravel()) for c in range(op.in_channels)]
        else:
            wm = w.reshape(op.out_channels, -1)
            outs = [(oc, range(wm.shape[1]), wm[oc]) for oc in range(op.out_channels)]
        for oc, rows, wrow in outs:
            for s0 in range(0, npix, em.vmax):
                vl = min(em.vmax, npix - s0)
                pairs = [(col_addr + (r * npix + s0) * em.eb, em.splat(wv)) for r, wv in zip(rows, wrow)]
                out = em.alloc_out(vl * 4)
                em.strip(vl, pairs, out, oc * npix + s0)
    em.prog.image_bytes = em.addr
    return em.prog


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    op: OperatorSpec
    strategy: str        # "MM", "FFCS", "CF", "FF" or "baseline"
    config: MachineConfig
    metrics: Metrics
    correct: bool
    output: np.ndarray | None = None

    @property
    def precision(self) -> Precision:
        return self.op.precision

    def peak_ops_per_cycle(self) -> float:
        return 2.0 * self.config.peak_macs_per_cycle(self.op.precision)

    def row(self) -> dict:
        m = self.metrics
        return {"operator": self.op.label(), "kind": self.op.kind.value, "strategy": self.strategy,
                "precision": self.op.precision.bits, "lanes": self.config.n_lanes,
                "tile_r": self.config.tile_r, "tile_c": self.config.tile_c, "cycles": m.cycles,
                "valid_ops": m.valid_ops, "ops_per_cycle": round(m.ops_per_cycle, 6),
                "ext_bytes": m.ext_bytes, "ext_bytes_read": m.ext_bytes_read,
                "ext_bytes_written": m.ext_bytes_written, "instr": m.instructions_total,
                "arith_instr": m.arithmetic_instructions, "regs": m.distinct_vector_registers,
                "correct": self.correct}


def _mem_size(nbytes: int) -> int:
    return max(1 << 20, 1 << max(20, math.ceil(math.log2(max(1, nbytes)))))


def _with_mem(cfg: MachineConfig, nbytes: int) -> MachineConfig:
    need = _mem_size(nbytes)
    if need <= cfg.mem_bytes:
        return cfg
    d = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    d["mem_bytes"] = need
    return MachineConfig(**d)


def _tensors(op, x, w, seed):
    if x is None or w is None:
        x, w = random_tensors(op, op_seed(seed, op))
    return x, w


def run_speed(op: OperatorSpec, cfg: MachineConfig | None = None, strategy: Strategy | str | None = None,
              n_param: int = 2, x=None, w=None, seed: int = 0, check: bool = True,
              trace_path=None) -> RunResult:
    """Plan, lower and execute ``op`` on the tensor-unit machine; compare with the oracle."""
    cfg = cfg or MachineConfig()
    x, w = _tensors(op, x, w, seed)
    if op.kind is Kind.MM and op.M < cfg.lanes and op.N > op.M:
        # too few A rows to occupy the lanes: compute C^T = B^T A^T instead
        t = OperatorSpec.mm(op.N, op.K, op.M, op.precision)
        r = run_speed(t, cfg, strategy, n_param, np.asarray(w).T, np.asarray(x).T, check=False,
                      trace_path=trace_path)
        return _finish(op, cfg, r.strategy, r.metrics, r.output.T, x, w, check)
    if op.kind is not Kind.MM and op.stride > 4:
        return _run_space_to_depth(op, cfg, strategy, n_param, x, w, check)
    if op.kind is not Kind.MM and max(op.kh, op.kw) > 15:
        return _run_decomposed(op, cfg, strategy, n_param, x, w, check)
    sch = plan(op, cfg, strategy, n_param)
    prog = lower(sch)
    mcfg = _with_mem(cfg, prog.image_bytes)
    m = new_machine(mcfg)
    metrics = run(m, prog, build_image(sch, prog, x, w), trace=trace_path is not None)
    if trace_path is not None:
        m.write_trace(trace_path)
    out = gather_outputs(sch, prog, m.ext_mem)
    ok = bool(np.array_equal(out, oracle(op, x, w))) if check else True
    return RunResult(op, sch.strategy.value, cfg, metrics, ok, out)


def _finish(op, cfg, strategy, metrics, out, x, w, check) -> RunResult:
    ok = bool(np.array_equal(out, oracle(op, x, w))) if check else True
    return RunResult(op, strategy, cfg, metrics, ok, out)


def space_to_depth(op: OperatorSpec, x: np.ndarray, w: np.ndarray):
    """Rewrite a stride-s convolution as a stride-1 one over s*s phase channels.

    Input channel c*s*s + ay*s + ax holds pixels (i*s + ay, j*s + ax) of the
    padded input; the kernel shrinks to ceil(k/s) with zero taps past k."""
    if op.kind is Kind.DWCV:
        raise ValueError("space-to-depth breaks depth-wise channel pairing")
    s, p = op.stride, op.padding
    kh, kw = -(-op.kh // s), -(-op.kw // s)
    hb, wb = op.out_h + kh - 1, op.out_w + kw - 1
    xp = np.zeros((op.in_channels, hb * s, wb * s), np.int64)
    src = np.pad(np.asarray(x, np.int64), ((0, 0), (p, p), (p, p)))[:, :hb * s, :wb * s]
    xp[:, :src.shape[1], :src.shape[2]] = src
    x2 = xp.reshape(op.in_channels, hb, s, wb, s).transpose(0, 2, 4, 1, 3).reshape(-1, hb, wb)
    wp = np.zeros((op.out_channels, op.in_channels, kh * s, kw * s), np.int64)
    wp[:, :, :op.kh, :op.kw] = w
    w2 = wp.reshape(op.out_channels, op.in_channels, kh, s, kw, s).transpose(0, 1, 3, 5, 2, 4)
    w2 = w2.reshape(op.out_channels, -1, kh, kw)
    kind = Kind.PWCV if kh == kw == 1 else Kind.CONV
    op2 = OperatorSpec(kind, op.precision, in_channels=op.in_channels * s * s, out_channels=op.out_channels,
                       height=hb, width=wb, kernel_size=kh, stride=1, padding=0,
                       kernel_w=None if kh == kw else kw)
    return op2, x2, w2


def _run_space_to_depth(op, cfg, strategy, n_param, x, w, check) -> RunResult:
    op2, x2, w2 = space_to_depth(op, x, w)
    r = run_speed(op2, cfg, strategy, n_param, x2, w2, check=False)
    # zero taps past the kernel edge are not useful work
    r.metrics.valid_ops = 2 * oracle_mac_count(op)
    return _finish(op, cfg, r.strategy, r.metrics, r.output, x, w, check)


def _run_decomposed(op, cfg, strategy, n_param, x, w, check) -> RunResult:
    dec = decompose_kernel(op)
    total = Metrics()
    outs = []
    strat = None
    for part in dec.parts:
        r = run_speed(part.op, cfg, strategy, n_param, part.crop_input(op, x), part.slice_weights(op, w), check=False)
        strat = r.strategy
        outs.append(r.output)
        for f in ("cycles", "instructions_total", "arithmetic_instructions", "ext_bytes_read",
                  "ext_bytes_written", "valid_ops", "macs_performed", "partial_writes"):
            setattr(total, f, getattr(total, f) + getattr(r.metrics, f))
        total.distinct_vector_registers = max(total.distinct_vector_registers, r.metrics.distinct_vector_registers)
    # sub-kernels see the padded input as data; padding taps are not useful work
    total.valid_ops = 2 * oracle_mac_count(op)
    out = dec.recombine(outs)
    ok = bool(np.array_equal(out, oracle(op, x, w))) if check else True
    return RunResult(op, strat, cfg, total, ok, out)


def run_baseline(op: OperatorSpec, params: BaselineParams | None = None, x=None, w=None, seed: int = 0,
                 check: bool = True, vlen_bits: int = 4096) -> RunResult:
    cfg = baseline_config(params, vlen_bits)
    x, w = _tensors(op, x, w, seed)
    prog = baseline_lower(op, cfg.baseline, x, w, cfg)
    m = new_machine(_with_mem(cfg, prog.image_bytes))
    metrics = run(m, prog, prog.image)
    out = np.zeros(int(np.prod(op.output_shape)), np.int64)
    for addr, start, n in prog.outputs:
        out[start:start + n] = m.ext_mem.peek(addr, 4 * n).view("<i4")
    out = out.reshape(op.output_shape)
    # VMACC over padded im2col entries is not useful work
    metrics.valid_ops = 2 * oracle_mac_count(op)
    ok = bool(np.array_equal(out, oracle(op, x, w))) if check else True
    return RunResult(op, "baseline", cfg, metrics, ok, out)


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

ORDER = ("FF", "FFCS", "CF", "baseline")


@dataclass
class ComparisonReport:
    runs: list[RunResult] = field(default_factory=list)

    def get(self, precision: Precision, strategy: str) -> RunResult | None:
        for r in self.runs:
            if r.precision is precision and r.strategy == strategy:
                return r
        return None

    @property
    def all_correct(self) -> bool:
        return all(r.correct for r in self.runs)

    def speedup(self, precision: Precision, strategy: str) -> float | None:
        b = self.get(precision, "baseline")
        s = self.get(precision, strategy)
        if b is None or s is None or s.metrics.cycles == 0:
            return None
        return b.metrics.cycles / s.metrics.cycles

    def access_ratio(self, precision: Precision, strategy: str) -> float | None:
        b = self.get(precision, "baseline")
        s = self.get(precision, strategy)
        if b is None or s is None or b.metrics.ext_bytes == 0:
            return None
        return s.metrics.ext_bytes / b.metrics.ext_bytes

    def access_ordering(self, precision: Precision) -> bool | None:
        """FF < FFCS < CF < baseline on external bytes (None unless all four ran)."""
        runs = [self.get(precision, s) for s in ORDER]
        if any(r is None for r in runs):
            return None
        b = [r.metrics.ext_bytes for r in runs]
        return all(x < y for x, y in zip(b, b[1:]))

    def rows(self) -> list[dict]:
        out = []
        for r in self.runs:
            row = r.row()
            sp = self.speedup(r.precision, r.strategy) if r.strategy != "baseline" else None
            ar = self.access_ratio(r.precision, r.strategy) if r.strategy != "baseline" else None
            row["speedup"] = None if sp is None else round(sp, 6)
            row["access_ratio"] = None if ar is None else round(ar, 6)
            out.append(row)
        return out


def compare(op: OperatorSpec, precisions=(Precision.INT16, Precision.INT8), strategies=None,
            cfg: MachineConfig | None = None, params: BaselineParams | None = None, seed: int = 0,
            n_param: int = 2, baseline: bool = True) -> ComparisonReport:
    """Run the baseline and each requested (default: every legal) strategy at each precision."""
    cfg = cfg or MachineConfig()
    rep = ComparisonReport()
    for p in precisions:
        p = Precision.from_bits(p) if isinstance(p, int) else p
        o = op.with_precision(p)
        x, w = random_tensors(o, op_seed(seed, o))
        strats = list(strategies) if strategies else list(legal_strategies(o))
        for s in strats:
            s = select_strategy(o, s)
            rep.runs.append(run_speed(o, cfg, s, n_param, x, w))
        if baseline and p is not Precision.INT4:
            rep.runs.append(run_baseline(o, params, x, w, vlen_bits=cfg.vlen_bits))
    return rep


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuiteEntry:
    name: str
    op: OperatorSpec
    strategy: str | None = None   # None = mixed policy
    precisions: tuple[int, ...] = (16, 8)
    repeat: int = 1               # identical layers (e.g. attention heads)


def suite_names() -> list[str]:
    files = resources.files("speedsim") / "suites"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_suite_file(name: str) -> dict:
    f = resources.files("speedsim") / "suites" / f"{name}.json"
    if not f.is_file():
        raise SuiteNotFound(name)
    return json.loads(f.read_text())


def entry_from_dict(d: dict, precisions=(16, 8)) -> SuiteEntry:
    kind = Kind(d["kind"])
    if kind is Kind.MM:
        op = OperatorSpec.mm(d["M"], d["K"], d["N"])
    elif kind is Kind.DWCV:
        op = OperatorSpec.dwcv(d["cin"], d["h"], d["w"], d["k"], d.get("s", 1), d.get("p", 0))
    else:
        op = OperatorSpec.conv(d["cin"], d["cout"], d["h"], d["w"], d["k"], d.get("s", 1), d.get("p", 0), kind=kind)
    return SuiteEntry(d["name"], op, d.get("strategy"), tuple(d.get("precisions", precisions)), int(d.get("repeat", 1)))


def model_suite(name: str) -> list[SuiteEntry]:
    """Layer table of a named suite (conv/MM layers only; other layers are counted in ``skipped``)."""
    data = load_suite_file(name)
    prec = tuple(data.get("precisions", (16, 8)))
    return [entry_from_dict(d, prec) for d in data["layers"]]


def run_entry(entry: SuiteEntry, cfg: MachineConfig | None = None, params: BaselineParams | None = None,
              seed: int = 0, baseline: bool = True) -> ComparisonReport:
    """One suite entry at each of its precisions under its strategy policy (None = mixed)."""
    return compare(entry.op, entry.precisions, [entry.strategy], cfg, params, seed, baseline=baseline)


def _log_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(min(hi, max(lo, math.floor(math.exp(rng.uniform(math.log(lo), math.log(hi + 1)))))))


def random_operator_layers(n: int, seed: int = 0) -> list[dict]:
    """``n`` random operator entries (suite layer dicts).

    CONV/PWCV k in {1,3,5,7}, s in {1,2}, maps and channels up to 32 / 64; DWCV
    likewise; MM dims up to 64.  Sizes are log-uniform so small shapes (where
    edge cases live) dominate while the bounds are still reached.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        u = rng.random()
        if u < 0.25:
            d = {"kind": "MM", "M": _log_int(rng, 1, 64), "K": _log_int(rng, 1, 64), "N": _log_int(rng, 1, 64)}
        else:
            k = int(rng.choice([1, 3, 5, 7]))
            s = int(rng.integers(1, 3))
            p = int(rng.integers(0, k // 2 + 1))
            lo = max(1, k - 2 * p)
            h, w = _log_int(rng, lo, 32), _log_int(rng, lo, 32)
            cin = _log_int(rng, 1, 64)
            if u < 0.4:
                d = {"kind": "DWCV", "cin": cin, "h": h, "w": w, "k": k, "s": s, "p": p}
            else:
                d = {"kind": "PWCV" if k == 1 else "CONV", "cin": cin, "cout": _log_int(rng, 1, 64),
                     "h": h, "w": w, "k": k, "s": s, "p": p}
        out.append({"name": f"rand{i:04d}", **d})
    return out
