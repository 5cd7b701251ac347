"""Dataflow planning (MM / FFCS / CF / FF), kernel decomposition and lowering to programs.

A plan is a list of steps.  Each step becomes one VSAM/VSAC and holds, per
stage, the packed-word ids every PE row/column consumes plus accumulator slot
indices.  Word ids index the operand tables built by :func:`pack_operands`;
lowering turns them into VRF byte addresses and load/store instructions.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .isa import (Instruction, Mnemonic, Precision, Program, Strategy, VsaCsr, encode_vtype, vsacfg)
from .machine import MachineConfig, StageBlock
from .mptu import pack_words, words_to_bytes

MAX_KERNEL = 15

# VRF partitioning (register numbers): two accumulator buffers, two input
# buffers and two weight buffers, so loads for the next step overlap compute.
ACC_REGS = (0, 8)
IN_REGS = (16, 20)
W_REGS = (24, 28)
ACC_BUF_REGS = 8
OPERAND_BUF_REGS = 4

X_AVL, X_ADDR, X_OUT, X_VL = 10, 11, 12, 5


class StrategyError(Exception):
    pass


class ScheduleError(Exception):
    pass


class LoweringError(Exception):
    pass


class Kind(enum.Enum):
    MM = "MM"
    CONV = "CONV"
    PWCV = "PWCV"
    DWCV = "DWCV"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class OperatorSpec:
    kind: Kind
    precision: Precision = Precision.INT16
    M: int = 0
    K: int = 0
    N: int = 0
    in_channels: int = 0
    out_channels: int = 0
    height: int = 0
    width: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    kernel_w: int | None = None  # rectangular kernels (decomposition sub-kernels)

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", Kind(self.kind))
        if isinstance(self.precision, (int, str)):
            bits = int(str(self.precision).lower().lstrip("int"))
            object.__setattr__(self, "precision", Precision.from_bits(bits))
        if self.kind is Kind.MM:
            if min(self.M, self.K, self.N) < 1:
                raise ValueError("MM dims must be >= 1")
            return
        if min(self.in_channels, self.out_channels, self.height, self.width, self.kernel_size, self.stride) < 1:
            raise ValueError("conv dims, kernel and stride must be >= 1")
        if self.kernel_w is not None and self.kernel_w < 1:
            raise ValueError("kernel_w must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.kind is Kind.PWCV and (self.kh != 1 or self.kw != 1):
            raise ValueError("PWCV requires a 1x1 kernel")
        if self.kind is Kind.DWCV and self.out_channels != self.in_channels:
            raise ValueError("DWCV requires out_channels == in_channels")
        if self.out_h < 1 or self.out_w < 1:
            raise ValueError("output spatial dims must be >= 1")

    @classmethod
    def mm(cls, M: int, K: int, N: int, precision: Precision = Precision.INT16) -> "OperatorSpec":
        return cls(Kind.MM, precision, M=M, K=K, N=N)

    @classmethod
    def conv(cls, cin: int, cout: int, h: int, w: int, k: int, stride: int = 1, padding: int = 0,
             precision: Precision = Precision.INT16, kind: Kind | None = None) -> "OperatorSpec":
        kind = kind or (Kind.PWCV if k == 1 else Kind.CONV)
        return cls(kind, precision, in_channels=cin, out_channels=cout, height=h, width=w,
                   kernel_size=k, stride=stride, padding=padding)

    @classmethod
    def dwcv(cls, c: int, h: int, w: int, k: int, stride: int = 1, padding: int = 0,
             precision: Precision = Precision.INT16) -> "OperatorSpec":
        return cls(Kind.DWCV, precision, in_channels=c, out_channels=c, height=h, width=w,
                   kernel_size=k, stride=stride, padding=padding)

    @property
    def kh(self) -> int:
        return self.kernel_size

    @property
    def kw(self) -> int:
        return self.kernel_size if self.kernel_w is None else self.kernel_w

    @property
    def out_h(self) -> int:
        return (self.height + 2 * self.padding - self.kh) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.width + 2 * self.padding - self.kw) // self.stride + 1

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.kind is Kind.MM:
            return (self.M, self.K)
        return (self.in_channels, self.height, self.width)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind is Kind.MM:
            return (self.K, self.N)
        if self.kind is Kind.DWCV:
            return (self.in_channels, self.kh, self.kw)
        return (self.out_channels, self.in_channels, self.kh, self.kw)

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.kind is Kind.MM:
            return (self.M, self.N)
        return (self.out_channels, self.out_h, self.out_w)

    def with_precision(self, precision: Precision) -> "OperatorSpec":
        return OperatorSpec(**{**self.to_dict(), "precision": precision})

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["kind"] = self.kind.value
        d["precision"] = self.precision.bits
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorSpec":
        d = dict(d)
        d["kind"] = Kind(d["kind"])
        d["precision"] = Precision.from_bits(int(d["precision"]))
        return cls(**d)

    def label(self) -> str:
        if self.kind is Kind.MM:
            return f"MM{self.M}x{self.K}x{self.N}"
        k = f"{self.kh}" if self.kw == self.kh else f"{self.kh}x{self.kw}"
        return (f"{self.kind.value}{k}_c{self.in_channels}-{self.out_channels}_"
                f"{self.height}x{self.width}_s{self.stride}p{self.padding}")


# ---------------------------------------------------------------------------
# strategy selection
# ---------------------------------------------------------------------------

def legal_strategies(op: OperatorSpec) -> tuple[Strategy, ...]:
    if op.kind is Kind.MM:
        return (Strategy.MM,)
    if op.kind is Kind.DWCV:
        return (Strategy.FF,)
    return (Strategy.FFCS, Strategy.CF, Strategy.FF)


def select_strategy(op: OperatorSpec, override: Strategy | str | None = None) -> Strategy:
    if override is not None:
        s = Strategy(override) if isinstance(override, str) else override
        if s not in legal_strategies(op):
            raise StrategyError(f"{s} is not applicable for the {op.kind} operator")
        return s
    if op.kind is Kind.MM:
        return Strategy.MM
    if op.kind is Kind.DWCV:
        return Strategy.FF
    if op.kind is Kind.PWCV or (op.kh == 1 and op.kw == 1):
        return Strategy.CF
    return Strategy.FFCS


# ---------------------------------------------------------------------------
# schedule types
# ---------------------------------------------------------------------------

@dataclass
class Step:
    """One multi-stage arithmetic instruction.

    in_words (S, L, R) / w_words (S, L, C): operand word ids, -1 = zero operand.
    acc_slot / wb_slot (S, L, R, C): slot in the step's output block, -1 = none.
    """

    in_key: tuple
    w_key: tuple
    out_block: int
    in_words: np.ndarray
    w_words: np.ndarray
    acc_slot: np.ndarray
    wb_slot: np.ndarray
    drain: np.ndarray
    final: np.ndarray
    valid_macs: int
    start: np.ndarray | None = None  # (S,) first MAC cycle of each stage; None = one stage per cycle

    def __post_init__(self):
        if self.start is None:
            self.start = np.ones(self.drain.shape[0], np.uint8)

    @property
    def n_stages(self) -> int:
        """MAC cycles (rows of the operand tables)."""
        return int(self.drain.shape[0])

    def to_dict(self) -> dict:
        return {"in_key": list(self.in_key), "w_key": list(self.w_key), "out_block": self.out_block,
                "in_words": self.in_words.tolist(), "w_words": self.w_words.tolist(),
                "acc_slot": self.acc_slot.tolist(), "wb_slot": self.wb_slot.tolist(),
                "drain": self.drain.tolist(), "final": self.final.tolist(), "valid_macs": self.valid_macs,
                "start": self.start.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Step":
        return cls(tuple(d["in_key"]), tuple(d["w_key"]), int(d["out_block"]),
                   np.array(d["in_words"], np.int64), np.array(d["w_words"], np.int64),
                   np.array(d["acc_slot"], np.int32), np.array(d["wb_slot"], np.int32),
                   np.array(d["drain"], np.uint8), np.array(d["final"], np.uint8), int(d["valid_macs"]),
                   np.array(d["start"], np.uint8) if "start" in d else None)


@dataclass
class Stage:
    """One processing stage: the MAC cycles between two stage starts.

    OP1 reuses the previous stage's weights; OP2 requests new ones."""

    op_class: str
    inputs: np.ndarray | None         # (cycles, L, R) word ids, None = same inputs as the previous stage
    weights: np.ndarray | None        # (cycles, L, C) word ids, None = reuse
    accumulation: np.ndarray | None   # (L, R, C) slots merged through the accumulation queue
    writeback: np.ndarray | None      # (L, R, C) slots written on drain
    drain: bool
    macs: int


@dataclass
class OperandSet:
    role: str          # "in" or "w"
    broadcast: bool    # one copy fetched and written to every lane (VSALD) vs per-lane (VLE)
    words: np.ndarray  # (1, n) for broadcast, (L, n) otherwise; -1 pads


@dataclass
class Schedule:
    op: OperatorSpec
    strategy: Strategy
    n_param: int
    config: MachineConfig
    steps: list[Step] = field(default_factory=list)
    out_blocks: list[np.ndarray] = field(default_factory=list)  # (L, slots, sub) output ids
    keep: bool = False
    sets: dict = field(default_factory=dict)

    @property
    def sub(self) -> int:
        return self.op.precision.pp if self.keep else 1

    @property
    def csr(self) -> VsaCsr:
        k = 1 if self.op.kind is Kind.MM else max(self.op.kh, self.op.kw)
        n = self.n_param if self.strategy is Strategy.FFCS else 1
        return VsaCsr(self.op.precision, k, self.strategy, n, 1 if self.op.kind is Kind.MM else self.op.stride)

    @property
    def valid_macs(self) -> int:
        return sum(s.valid_macs for s in self.steps)

    def stages(self):
        prev_w = None
        prev_in = None
        for st in self.steps:
            bounds = [*np.flatnonzero(st.start), st.n_stages]
            if bounds[0] != 0:
                bounds.insert(0, 0)
            for s0, s1 in zip(bounds, bounds[1:]):
                w = st.w_words[s0:s1]
                i = st.in_words[s0:s1]
                reuse_w = prev_w is not None and np.array_equal(prev_w, w)
                reuse_i = prev_in is not None and np.array_equal(prev_in, i)
                acc = st.acc_slot[s0:s1].max(axis=0)
                macs = int(np.count_nonzero((i[:, :, :, None] >= 0) & (w[:, :, None, :] >= 0)))
                drained = bool(st.drain[s1 - 1])
                yield Stage("OP1" if reuse_w else "OP2", None if reuse_i else i.copy(),
                            None if reuse_w else w.copy(), acc.copy() if (acc >= 0).any() else None,
                            st.wb_slot[s1 - 1].copy() if drained else None, drained, macs)
                prev_w, prev_in = w, i

    def to_dict(self) -> dict:
        return {"op": self.op.to_dict(), "strategy": self.strategy.value, "n_param": self.n_param,
                "config": self.config.to_dict(), "keep": self.keep,
                "steps": [s.to_dict() for s in self.steps],
                "out_blocks": [b.tolist() for b in self.out_blocks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        from .machine import BaselineParams
        cfg = dict(d["config"])
        if cfg.get("baseline"):
            cfg["baseline"] = BaselineParams(**cfg["baseline"])
        sch = cls(OperatorSpec.from_dict(d["op"]), Strategy(d["strategy"]), int(d["n_param"]),
                  MachineConfig(**cfg), [Step.from_dict(s) for s in d["steps"]],
                  [np.array(b, np.int64) for b in d["out_blocks"]], bool(d["keep"]))
        _collect_sets(sch)
        return sch

    @classmethod
    def from_json(cls, text: str) -> "Schedule":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# capacities and helpers
# ---------------------------------------------------------------------------

def _caps(cfg: MachineConfig, p: Precision, keep: bool) -> tuple[int, int]:
    """(operand words per lane per buffer, accumulator slots per lane per buffer)."""
    rb = cfg.reg_bytes
    words = OPERAND_BUF_REGS * rb // p.operand_bytes
    slots = ACC_BUF_REGS * rb // (4 * (p.pp if keep else 1))
    return words, slots


def _broadcast_roles(kind: Kind) -> tuple[bool, bool]:
    """(inputs broadcast, weights broadcast)."""
    if kind is Kind.MM:
        return False, True
    if kind is Kind.DWCV:
        return False, False
    return True, False


def _collect_sets(sch: Schedule) -> None:
    in_b, w_b = _broadcast_roles(sch.op.kind)
    L = sch.config.lanes
    cap, _ = _caps(sch.config, sch.op.precision, sch.keep)
    gathered: dict = {}
    for st in sch.steps:
        gathered.setdefault(("in", st.in_key), []).append(st.in_words)
        gathered.setdefault(("w", st.w_key), []).append(st.w_words)
    sets = {}
    for (role, key), arrs in gathered.items():
        bcast = in_b if role == "in" else w_b
        lanes = [np.concatenate([a[:, l].ravel() for a in arrs]) for l in range(L)]
        if bcast:
            u = np.unique(np.concatenate(lanes))
            words = u[u >= 0][None, :]
        else:
            per = [np.unique(x[x >= 0]) for x in lanes]
            n = max(1, max(len(x) for x in per))
            words = np.full((L, n), -1, np.int64)
            for l, x in enumerate(per):
                words[l, :len(x)] = x
        if words.shape[1] == 0:
            words = np.full((words.shape[0], 1), -1, np.int64)
        if words.shape[1] > cap:
            raise ScheduleError(f"operand set {role}{key} needs {words.shape[1]} words per lane; "
                                f"buffer holds {cap}")
        sets[(role, key)] = OperandSet(role, bcast, words)
    sch.sets = sets


def _real_counts(op: OperatorSpec, role: str, ids: np.ndarray) -> np.ndarray:
    """Number of real (not zero-padded) packed elements of each word id."""
    pp = op.precision.pp
    ids = np.asarray(ids)
    safe = np.maximum(ids, 0)
    if op.kind is Kind.MM:
        kc_n = math.ceil(op.K / pp)
        grp, total = safe % kc_n, op.K
    elif op.kind is Kind.DWCV:
        cg_n = math.ceil(op.in_channels / pp)
        grp = safe % cg_n if role == "in" else safe // (op.kh * op.kw)
        total = op.in_channels
    else:
        cg_n = math.ceil(op.in_channels / pp)
        grp, total = safe % cg_n, op.in_channels
    real = np.clip(total - grp * pp, 0, pp)
    return np.where(ids >= 0, real, 0)


# ---------------------------------------------------------------------------
# MM
# ---------------------------------------------------------------------------

def plan_mm(op: OperatorSpec, cfg: MachineConfig) -> Schedule:
    """Rows of A are split across lanes and PE rows, columns of B are broadcast
    to every lane.  One instruction per (column group, K chunk) walks the
    packed K words inside the PEs and drains once; a later K chunk merges the
    drained partial sums through the accumulation queue."""
    if op.kind is not Kind.MM:
        raise StrategyError(f"MM strategy is not applicable for the {op.kind} operator")
    L, R, C = cfg.lanes, cfg.tile_r, cfg.tile_c
    pp = op.precision.pp
    kc_n = math.ceil(op.K / pp)
    cap, acc_cap = _caps(cfg, op.precision, False)
    rows_per_pass = L * R
    n_groups = math.ceil(op.N / C)
    nbc = max(1, min(n_groups, acc_cap // (R * C)))
    qk = max(1, min(kc_n, cap // R, cap // C))
    real_k = _real_counts(op, "in", np.arange(kc_n))
    sch = Schedule(op, Strategy.MM, 1, cfg)
    lane_r = np.arange(L)[:, None] * R + np.arange(R)[None, :]  # (L, R)
    for rp in range(math.ceil(op.M / rows_per_pass)):
        m = rp * rows_per_pass + lane_r
        m_ok = m < op.M
        for cb0 in range(0, n_groups, nbc):
            groups = range(cb0, min(cb0 + nbc, n_groups))
            n = np.array(groups)[:, None] * C + np.arange(C)[None, :]  # (G, C)
            n_ok = n < op.N
            block = len(sch.out_blocks)
            slot = ((np.arange(len(groups))[:, None, None, None] * R + np.arange(R)[None, None, :, None]) * C
                    + np.arange(C)[None, None, None, :])
            ok = m_ok[None, :, :, None] & n_ok[:, None, None, :]
            wb_all = np.where(ok, np.broadcast_to(slot, ok.shape), -1).astype(np.int32)
            out = np.full((L, len(groups) * R * C, 1), -1, np.int64)
            ids = m[None, :, :, None] * op.N + n[:, None, None, :]
            out[np.broadcast_to(np.arange(L)[None, :, None, None], ok.shape)[ok], wb_all[ok], 0] = ids[ok]
            sch.out_blocks.append(out)
            for kb0 in range(0, kc_n, qk):
                ks = np.arange(kb0, min(kb0 + qk, kc_n))
                S = ks.size
                in_w = np.where(m_ok[None], m[None] * kc_n + ks[:, None, None], -1).astype(np.int64)
                for gi, g in enumerate(groups):
                    w_w = np.where(n_ok[gi][None], n[gi][None] * kc_n + ks[:, None], -1)
                    w_words = np.broadcast_to(w_w[:, None, :], (S, L, C)).astype(np.int64)
                    wb = np.broadcast_to(wb_all[gi], (S, L, R, C)).copy()
                    acc = np.full_like(wb, -1)
                    if kb0 > 0:
                        acc[0] = wb_all[gi]
                    drain = np.zeros(S, np.uint8)
                    drain[-1] = 1
                    final = drain * (1 if ks[-1] == kc_n - 1 else 0)
                    valid = int(np.count_nonzero(ok[gi])) * int(real_k[ks].sum())
                    start = np.zeros(S, np.uint8)
                    start[0] = 1
                    sch.steps.append(Step(("A", rp, kb0), ("B", g, kb0), block, in_w, w_words,
                                          acc, wb, drain, final.astype(np.uint8), valid, start))
    _collect_sets(sch)
    return sch


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _input_base(op: OperatorSpec, groups: int) -> np.ndarray:
    """(npix, kk) word-id base of the input tap for each output pixel, -1 in padding."""
    oy, ox = np.divmod(np.arange(op.out_h * op.out_w), op.out_w)
    ky, kx = np.divmod(np.arange(op.kh * op.kw), op.kw)
    iy = oy[:, None] * op.stride + ky[None, :] - op.padding
    ix = ox[:, None] * op.stride + kx[None, :] - op.padding
    ok = (iy >= 0) & (iy < op.height) & (ix >= 0) & (ix < op.width)
    return np.where(ok, (iy * op.width + ix) * groups, -1)


def _chunks(n: int, size: int) -> list[range]:
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def plan_conv(op: OperatorSpec, strategy: Strategy | str | None, n_param: int, cfg: MachineConfig) -> Schedule:
    strategy = select_strategy(op, strategy)
    if op.kind is Kind.MM:
        raise StrategyError("use plan_mm for MM operators")
    if max(op.kh, op.kw) > MAX_KERNEL:
        raise ScheduleError(f"kernel {op.kh}x{op.kw} exceeds {MAX_KERNEL}; decompose it first")
    if op.stride > 4:
        raise ScheduleError("stride above 4 is not encodable")
    if strategy is Strategy.FFCS and not 1 <= n_param <= 7:
        raise ScheduleError("FFCS stage parameter N must be in 1..7")
    if op.kind is Kind.DWCV:
        return _plan_dw(op, cfg)
    return _plan_dense(op, strategy, n_param, cfg)


def _plan_dense(op: OperatorSpec, strategy: Strategy, n_param: int, cfg: MachineConfig) -> Schedule:
    """Dense convolution.  Inputs are broadcast, lane l / PE column c owns output
    channel pass*L*C + l*C + c, PE rows walk R consecutive output pixels.

    A stage walks the kernel window of one packed channel group inside the PEs
    and then drains (FFCS, FF: partial sums merge through the accumulation
    queue), except CF, whose single stage per tile walks every channel group
    and drains only the final result."""
    L, R, C = cfg.lanes, cfg.tile_r, cfg.tile_c
    pp = op.precision.pp
    cg_n = math.ceil(op.in_channels / pp)
    kk = op.kh * op.kw
    npix = op.out_h * op.out_w
    T = math.ceil(npix / R)
    G = L * C
    cap, acc_cap = _caps(cfg, op.precision, False)
    base = _input_base(op, cg_n)
    # reduction items: kernel position innermost within a channel group
    red_c, red_k = np.divmod(np.arange(cg_n * kk), kk)
    nred = red_k.size
    real = np.clip(op.in_channels - red_c * pp, 0, pp)
    tiles_per_block = max(1, acc_cap // (R * C))
    if strategy is Strategy.FFCS:
        tiles_per_block = max(n_param, tiles_per_block - tiles_per_block % n_param)
    nb = n_param if strategy is Strategy.FFCS else 1
    u_max = max(1, min(kk, cap // (nb * R), cap // C))
    units = [np.arange(c * kk + k0, c * kk + min(k0 + u_max, kk)) for c in range(cg_n) for k0 in range(0, kk, u_max)]
    geo = _DenseGeometry(op, base, red_k, red_c, real, R, C, nred)
    sch = Schedule(op, strategy, n_param, cfg)
    lane_c = np.arange(L)[:, None] * C + np.arange(C)[None, :]

    for p in range(math.ceil(op.out_channels / G)):
        oc = p * G + lane_c
        oc_ok = oc < op.out_channels
        for b0 in range(0, T, tiles_per_block):
            b_tiles = range(b0, min(b0 + tiles_per_block, T))
            block = len(sch.out_blocks)
            sch.out_blocks.append(_dense_out_block(op, b_tiles, oc, oc_ok, R, C))
            if strategy is Strategy.CF:
                q = max(1, min(nred, cap // R, cap // C))
                for t in b_tiles:
                    for j, ch in enumerate(_chunks(nred, q)):
                        unit = np.array(ch)
                        sch.steps.append(geo.step([t], b0, [unit], oc, oc_ok, cf=True,
                                                  keys=(("X", t, j), ("W", p, t, j)), block=block))
            elif strategy is Strategy.FFCS:
                q = max(u_max, min(cap // (n_param * R), cap // C))
                for g0 in range(b_tiles.start, b_tiles.stop, n_param):
                    group = list(range(g0, min(g0 + n_param, b_tiles.stop)))
                    for j, chunk in enumerate(_group_units(units, q)):
                        sch.steps.append(geo.step(group, b0, chunk, oc, oc_ok, cf=False,
                                                  keys=(("X", g0, j), ("W", p, g0, j)), block=block))
            else:  # FF
                q = max(u_max, cap // C)
                for j, chunk in enumerate(_group_units(units, q)):
                    n_red = sum(u.size for u in chunk)
                    sb = max(1, cap // (R * n_red))
                    for s0 in range(b_tiles.start, b_tiles.stop, sb):
                        sub = list(range(s0, min(s0 + sb, b_tiles.stop)))
                        sch.steps.append(geo.step(sub, b0, chunk, oc, oc_ok, cf=False,
                                                  keys=(("X", s0, j), ("W", p, j)), block=block))
    _collect_sets(sch)
    return sch


def _group_units(units: list[np.ndarray], q: int) -> list[list[np.ndarray]]:
    """Pack consecutive stage units into chunks of at most q reduction items."""
    out, cur, n = [], [], 0
    for u in units:
        if cur and n + u.size > q:
            out.append(cur)
            cur, n = [], 0
        cur.append(u)
        n += u.size
    if cur:
        out.append(cur)
    return out


def _dense_out_block(op, tiles, oc, oc_ok, R, C) -> np.ndarray:
    L = oc.shape[0]
    npix = op.out_h * op.out_w
    pix = np.array(tiles)[:, None] * R + np.arange(R)[None, :]  # (nt, R)
    ids = oc[:, None, None, :] * npix + pix[None, :, :, None]     # (L, nt, R, C)
    ok = oc_ok[:, None, None, :] & (pix < npix)[None, :, :, None]
    return np.where(ok, ids, -1).reshape(L, -1, 1)


@dataclass
class _DenseGeometry:
    op: OperatorSpec
    base: np.ndarray
    red_k: np.ndarray
    red_c: np.ndarray
    real: np.ndarray
    R: int
    C: int
    nred: int

    def step(self, tiles, b0, units, oc, oc_ok, cf: bool, keys, block) -> Step:
        """Stages ordered unit -> tile -> reduction item (one MAC cycle each)."""
        op, R, C = self.op, self.R, self.C
        L = oc.shape[0]
        npix = self.base.shape[0]
        cg_n = math.ceil(op.in_channels / op.precision.pp)
        kk = op.kh * op.kw
        j_parts, t_parts, first_parts, end_parts = [], [], [], []
        for u in units:
            for t in tiles:
                j_parts.append(u)
                t_parts.append(np.full(u.size, t))
                f = np.zeros(u.size, bool)
                e = np.zeros(u.size, bool)
                f[0] = True
                e[-1] = True
                first_parts.append(f)
                end_parts.append(e)
        j = np.concatenate(j_parts)
        t = np.concatenate(t_parts)
        first = np.concatenate(first_parts)
        end = np.concatenate(end_parts)
        S = j.size
        pix = t[:, None] * R + np.arange(R)[None, :]
        pix_ok = pix < npix
        b = np.where(pix_ok, self.base[np.minimum(pix, npix - 1), self.red_k[j][:, None]], -1)
        in_w = np.where(b >= 0, b + self.red_c[j][:, None], -1)
        in_words = np.broadcast_to(in_w[:, None, :], (S, L, R)).astype(np.int64)
        w_words = np.where(oc_ok[None], (oc[None] * kk + self.red_k[j][:, None, None]) * cg_n
                           + self.red_c[j][:, None, None], -1).astype(np.int64)
        local = (t - b0)[:, None] * R + np.arange(R)[None, :]
        slot = local[:, None, :, None] * C + np.arange(C)[None, None, None, :]
        ok = pix_ok[:, None, :, None] & oc_ok[None, :, None, :]
        wb = np.where(ok, slot, -1).astype(np.int32)
        last = j == self.nred - 1
        if cf:
            acc = np.full_like(wb, -1)
            drain = last.astype(np.uint8)
            final = last.astype(np.uint8)
        else:
            # merge the slot's earlier partial sum on the first cycle of every
            # stage that does not start the reduction
            acc = np.where((first & (j > 0))[:, None, None, None], wb, -1).astype(np.int32)
            drain = end.astype(np.uint8)
            final = (end & last).astype(np.uint8)
        valid = int((np.count_nonzero(in_w >= 0, axis=1) * self.real[j]).sum()) * int(np.count_nonzero(oc_ok))
        # a stage is one channel group's kernel window (or the part of it in this unit) for one tile
        start = first.copy()
        start[1:] |= (self.red_c[j][1:] != self.red_c[j][:-1]) | (t[1:] != t[:-1])
        return Step(keys[0], keys[1], block, in_words, w_words, acc, wb, drain, final, valid,
                    start.astype(np.uint8))


def _plan_dw(op: OperatorSpec, cfg: MachineConfig) -> Schedule:
    """Depth-wise: lane l owns channel group g (PP channels packed in one word),
    PE rows walk output pixels and only PE column 0 is used.  A stage walks the
    kernel window of one tile with the channel's weights and drains; each PE
    keeps its PP channel results separate (VSAC), nothing crosses channels."""
    L, R, C = cfg.lanes, cfg.tile_r, cfg.tile_c
    pp = op.precision.pp
    cg_n = math.ceil(op.in_channels / pp)
    kk = op.kh * op.kw
    npix = op.out_h * op.out_w
    T = math.ceil(npix / R)
    cap, acc_cap = _caps(cfg, op.precision, True)
    base = _input_base(op, cg_n)
    tiles_per_block = max(1, acc_cap // R)
    u_max = max(1, min(kk, cap // R))
    chunks = _chunks(kk, u_max)
    sch = Schedule(op, Strategy.FF, 1, cfg, keep=True)
    lanes = np.arange(L)
    for p in range(math.ceil(cg_n / L)):
        g = p * L + lanes
        g_ok = g < cg_n
        real = np.where(g_ok, np.clip(op.in_channels - g * pp, 0, pp), 0)
        for b0 in range(0, T, tiles_per_block):
            b_tiles = range(b0, min(b0 + tiles_per_block, T))
            block = len(sch.out_blocks)
            pix = np.array(b_tiles)[:, None] * R + np.arange(R)[None, :]
            ch = g[:, None] * pp + np.arange(pp)[None, :]
            ok = (pix < npix)[None, :, :, None] & (ch < op.in_channels)[:, None, None, :] & g_ok[:, None, None, None]
            ids = np.where(ok, ch[:, None, None, :] * npix + pix[None, :, :, None], -1)
            sch.out_blocks.append(ids.reshape(L, -1, pp))
            for j, chunk in enumerate(chunks):
                sb = max(1, cap // (R * len(chunk)))
                for s0 in range(b_tiles.start, b_tiles.stop, sb):
                    tiles = np.arange(s0, min(s0 + sb, b_tiles.stop))
                    kpos = np.tile(np.array(chunk), tiles.size)
                    t = np.repeat(tiles, len(chunk))
                    S = t.size
                    pixs = t[:, None] * R + np.arange(R)[None, :]
                    pix_ok = pixs < npix
                    bb = np.where(pix_ok, base[np.minimum(pixs, npix - 1), kpos[:, None]], -1)
                    in_w = np.where((bb[:, None, :] >= 0) & g_ok[None, :, None], bb[:, None, :] + g[None, :, None], -1)
                    w_words = np.full((S, L, C), -1, np.int64)
                    w_words[:, :, 0] = np.where(g_ok[None, :], g[None, :] * kk + kpos[:, None], -1)
                    local = (t - b0)[:, None] * R + np.arange(R)[None, :]
                    wb = np.full((S, L, R, C), -1, np.int32)
                    wb[:, :, :, 0] = np.where(pix_ok[:, None, :] & g_ok[None, :, None], local[:, None, :], -1)
                    start = kpos == chunk[0]
                    end = kpos == chunk[-1]
                    acc = np.where((start & (kpos > 0))[:, None, None, None], wb, -1).astype(np.int32)
                    valid = int(((in_w >= 0).sum(axis=2) * real[None, :]).sum())
                    sch.steps.append(Step(("X", p, s0, j), ("W", p, j), block, in_w.astype(np.int64), w_words,
                                          acc, wb, end.astype(np.uint8), (kpos == kk - 1).astype(np.uint8), valid,
                                          start.astype(np.uint8)))
    _collect_sets(sch)
    return sch


def plan(op: OperatorSpec, cfg: MachineConfig, strategy: Strategy | str | None = None, n_param: int = 2) -> Schedule:
    if op.kind is Kind.MM:
        select_strategy(op, strategy)
        return plan_mm(op, cfg)
    return plan_conv(op, strategy, n_param, cfg)


# ---------------------------------------------------------------------------
# schedule checks
# ---------------------------------------------------------------------------

def validate(sch: Schedule) -> np.ndarray:
    """Symbolically execute the schedule and return, per output element, how
    many element MACs reach its final value.  Raises ScheduleError on an
    accumulation read of a slot nobody wrote, or a block larger than a buffer."""
    op = sch.op
    L, R, C = sch.config.lanes, sch.config.tile_r, sch.config.tile_c
    pp = op.precision.pp
    sub = sch.sub
    _, acc_cap = _caps(sch.config, op.precision, sch.keep)
    counts = np.zeros(int(np.prod(op.output_shape)), np.int64)
    slots = [np.zeros((L, b.shape[1], pp), np.int64) for b in sch.out_blocks]
    written = [np.zeros((L, b.shape[1]), bool) for b in sch.out_blocks]
    for b in sch.out_blocks:
        if b.shape[1] > acc_cap:
            raise ScheduleError(f"output block of {b.shape[1]} slots exceeds accumulator buffer ({acc_cap})")
    pe = np.zeros((L, R, C, pp), np.int64)
    lane_grid = np.broadcast_to(np.arange(L)[:, None, None], (L, R, C))
    subk = np.arange(pp)
    for st in sch.steps:
        blk_slots, blk_written = slots[st.out_block], written[st.out_block]
        for s in range(st.n_stages):
            ri = _real_counts(op, "in", st.in_words[s])  # (L, R)
            rw = _real_counts(op, "w", st.w_words[s])    # (L, C)
            n = np.minimum(ri[:, :, None], rw[:, None, :])
            pe += (subk[None, None, None, :] < n[..., None])
            a = st.acc_slot[s]
            sel = a >= 0
            if sel.any():
                if not blk_written[lane_grid[sel], a[sel]].all():
                    raise ScheduleError("accumulation read of a slot before any write-back")
                pe[sel] += blk_slots[lane_grid[sel], a[sel]]
            if st.drain[s]:
                w = st.wb_slot[s]
                sel = w >= 0
                vals = pe[sel] if sch.keep else pe[sel].sum(axis=-1, keepdims=True) * (subk == 0)
                blk_slots[lane_grid[sel], w[sel]] = vals
                blk_written[lane_grid[sel], w[sel]] = True
                pe[...] = 0
    for b, ids in enumerate(sch.out_blocks):
        v = slots[b][:, :, :sub]
        m = ids >= 0
        np.add.at(counts, ids[m], v[m])
    return counts


# ---------------------------------------------------------------------------
# kernel decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubKernel:
    op: OperatorSpec  # valid (unpadded) conv over the cropped padded input
    ky0: int
    kx0: int

    def crop_input(self, parent: OperatorSpec, x: np.ndarray) -> np.ndarray:
        p = parent.padding
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        return xp[:, self.ky0:self.ky0 + self.op.height, self.kx0:self.kx0 + self.op.width]

    def slice_weights(self, parent: OperatorSpec, w: np.ndarray) -> np.ndarray:
        return w[..., self.ky0:self.ky0 + self.op.kh, self.kx0:self.kx0 + self.op.kw]


@dataclass(frozen=True)
class Decomposition:
    parent: OperatorSpec
    parts: tuple[SubKernel, ...]

    @staticmethod
    def recombine(results) -> np.ndarray:
        total = np.zeros_like(np.asarray(results[0], np.int64))
        for r in results:
            total = total + np.asarray(r, np.int64)
        return ((total + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)


def _strips(k: int) -> list[tuple[int, int]]:
    return [(s, min(MAX_KERNEL, k - s)) for s in range(0, k, MAX_KERNEL)]


def decompose_kernel(op: OperatorSpec) -> Decomposition:
    """Split a kernel into tiles of side <= 15 (greedy 15-wide strips, remainder
    last).  Each tile is a stride-s valid convolution over the padded input
    window shifted by the tile's offset; summing the partial outputs gives the
    full convolution."""
    if op.kind is Kind.MM:
        raise ValueError("only convolutions have kernels to decompose")
    if max(op.kh, op.kw) <= MAX_KERNEL:
        return Decomposition(op, (SubKernel(op, 0, 0),))
    parts = []
    for ky0, kh in _strips(op.kh):
        for kx0, kw in _strips(op.kw):
            h = (op.out_h - 1) * op.stride + kh
            w = (op.out_w - 1) * op.stride + kw
            kind = Kind.PWCV if kh == kw == 1 and op.kind is not Kind.DWCV else (
                Kind.DWCV if op.kind is Kind.DWCV else Kind.CONV)
            sub = OperatorSpec(kind, op.precision, in_channels=op.in_channels, out_channels=op.out_channels,
                               height=h, width=w, kernel_size=kh, stride=op.stride, padding=0,
                               kernel_w=None if kw == kh else kw)
            parts.append(SubKernel(sub, ky0, kx0))
    return Decomposition(op, tuple(parts))


# ---------------------------------------------------------------------------
# operand packing
# ---------------------------------------------------------------------------

def _pad_axis(a: np.ndarray, axis: int, size: int) -> np.ndarray:
    if a.shape[axis] == size:
        return a
    pad = [(0, 0)] * a.ndim
    pad[axis] = (0, size - a.shape[axis])
    return np.pad(a, pad)


def pack_operands(op: OperatorSpec, x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Packed uint64 word tables (inputs, weights) indexed by the planners' word ids."""
    p = op.precision
    pp = p.pp
    x = np.asarray(x, np.int64)
    w = np.asarray(w, np.int64)
    if x.shape != op.input_shape or w.shape != op.weight_shape:
        raise ValueError(f"tensor shapes {x.shape}/{w.shape} do not match {op.input_shape}/{op.weight_shape}")
    if op.kind is Kind.MM:
        kc = math.ceil(op.K / pp) * pp
        a = _pad_axis(x, 1, kc).reshape(-1, pp)
        b = _pad_axis(w.T, 1, kc).reshape(-1, pp)
        return pack_words(a, p), pack_words(b, p)
    cpad = math.ceil(op.in_channels / pp) * pp
    xi = _pad_axis(x, 0, cpad).transpose(1, 2, 0).reshape(-1, pp)
    if op.kind is Kind.DWCV:
        wi = _pad_axis(w.reshape(op.in_channels, -1), 0, cpad)           # (cpad, kk)
        wi = wi.reshape(-1, pp, op.kh * op.kw).transpose(0, 2, 1).reshape(-1, pp)
    else:
        wi = _pad_axis(w, 1, cpad).transpose(0, 2, 3, 1).reshape(-1, pp)
    return pack_words(xi, p), pack_words(wi, p)


# ---------------------------------------------------------------------------
# lowering
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    address: int
    role: str
    key: tuple
    nbytes: int


@dataclass
class LoweredProgram(Program):
    """Program plus the host-side memory layout it was lowered against."""

    segments: list[Segment] = field(default_factory=list)
    outputs: list[tuple[int, int]] = field(default_factory=list)  # (address, out block)
    image_bytes: int = 0


def _align(n: int, a: int = 64) -> int:
    return (n + a - 1) // a * a


def _lmul_for(vl: int, sew: int, cfg: MachineConfig) -> int:
    for lmul in (1, 2, 4, 8):
        if vl <= lmul * cfg.vlen_bits * cfg.lanes // sew:
            return lmul
    raise LoweringError(f"vl {vl} exceeds VLMAX at e{sew}, m8")


def _positions(words: np.ndarray, ids: np.ndarray, lane_axis: int = 1) -> np.ndarray:
    """Position of each id inside its lane's row of ``words`` (-1 for id -1)."""
    out = np.full(ids.shape, -1, np.int64)
    rows = words.shape[0]
    for l in range(ids.shape[lane_axis]):
        row = words[0 if rows == 1 else l]
        n = int(np.count_nonzero(row >= 0))
        keys = row[:n]
        sel = np.take(ids, l, axis=lane_axis)
        pos = np.searchsorted(keys, np.maximum(sel, 0))
        pos = np.where(sel >= 0, pos, -1)
        idx = [slice(None)] * ids.ndim
        idx[lane_axis] = l
        out[tuple(idx)] = pos
    return out


class _Emitter:
    def __init__(self, sch: Schedule, prog: LoweredProgram):
        self.sch = sch
        self.cfg = sch.config
        self.prog = prog
        self.vtype = None
        self.next_addr = 0
        self.seg_addr: dict = {}
        self.resident = {"in": [None, None], "w": [None, None]}
        self.last_buf = {"in": -1, "w": -1}

    def setvl(self, vl: int, sew: int) -> None:
        lmul = _lmul_for(vl, sew, self.cfg)
        if self.vtype != (vl, sew, lmul):
            self.prog.append(Instruction(Mnemonic.VSETVLI, rd=X_VL, rs1=X_AVL, zimm=encode_vtype(sew, lmul)),
                             {X_AVL: vl})
            self.vtype = (vl, sew, lmul)

    def alloc(self, nbytes: int) -> int:
        a = self.next_addr
        self.next_addr = _align(a + nbytes)
        return a

    def ensure(self, role: str, key: tuple) -> int:
        res = self.resident[role]
        if key in res:
            buf = res.index(key)
        else:
            buf = 1 - self.last_buf[role] if self.last_buf[role] >= 0 else 0
            self._load(role, key, buf)
            res[buf] = key
        self.last_buf[role] = buf
        return buf

    def _load(self, role: str, key: tuple, buf: int) -> None:
        s = self.sch.sets[(role, key)]
        ob = self.sch.op.precision.operand_bytes
        per_lane = s.words.shape[1] * ob
        total = per_lane if s.broadcast else per_lane * self.cfg.lanes
        if (role, key) not in self.seg_addr:
            addr = self.alloc(total)
            self.seg_addr[(role, key)] = addr
            self.prog.segments.append(Segment(addr, role, key, total))
        addr = self.seg_addr[(role, key)]
        reg = (IN_REGS if role == "in" else W_REGS)[buf]
        self.setvl(total // 2, 16)
        if s.broadcast:
            instr = Instruction(Mnemonic.VSALD, vd=reg, rs1=X_ADDR, width=self.sch.op.precision.bits)
        else:
            instr = Instruction(Mnemonic.VLE, vd=reg, rs1=X_ADDR, width=16)
        self.prog.append(instr, {X_ADDR: addr})

    def store(self, block: int, buf: int) -> None:
        ids = self.sch.out_blocks[block]
        n = ids.shape[1] * self.sch.sub
        self.setvl(self.cfg.lanes * n, 32)
        addr = self.alloc(self.cfg.lanes * n * 4)
        self.prog.append(Instruction(Mnemonic.VSE, vd=ACC_REGS[buf], rs1=X_OUT, width=32), {X_OUT: addr})
        self.prog.outputs.append((addr, block))


def lower(sch: Schedule) -> LoweredProgram:
    """Emit VSACFG, then per step: operand loads (VSALD for broadcast sets,
    VLE for per-lane sets) when a set is not resident, one VSAM/VSAC carrying
    the stage descriptors, and a VSE32 once an output block is complete."""
    prog = LoweredProgram()
    prog.append(vsacfg(sch.csr))
    if not sch.steps:
        return prog
    cfg = sch.config
    rb = cfg.reg_bytes
    p = sch.op.precision
    ob = p.operand_bytes
    slot_bytes = 4 * sch.sub
    in_cap, acc_cap = _caps(cfg, p, sch.keep)
    for b in sch.out_blocks:
        if b.shape[1] > acc_cap:
            raise LoweringError(f"output block of {b.shape[1]} slots overflows the accumulator registers")
    for s in sch.sets.values():
        if s.words.shape[1] > in_cap:
            raise LoweringError("operand set overflows its register buffer")
    em = _Emitter(sch, prog)
    last_step = {}
    for i, st in enumerate(sch.steps):
        last_step[st.out_block] = i
    acc_buf: dict[int, int] = {}
    next_acc = 0
    mnem = Mnemonic.VSAC if sch.keep else Mnemonic.VSAM
    for i, st in enumerate(sch.steps):
        ib = em.ensure("in", st.in_key)
        wb = em.ensure("w", st.w_key)
        if st.out_block not in acc_buf:
            acc_buf[st.out_block] = next_acc
            next_acc ^= 1
        ab = acc_buf[st.out_block]
        in_pos = _positions(sch.sets[("in", st.in_key)].words, st.in_words)
        w_pos = _positions(sch.sets[("w", st.w_key)].words, st.w_words)
        acc_base = ACC_REGS[ab] * rb
        block = StageBlock(
            np.where(in_pos >= 0, IN_REGS[ib] * rb + in_pos * ob, -1).astype(np.int32),
            np.where(w_pos >= 0, W_REGS[wb] * rb + w_pos * ob, -1).astype(np.int32),
            np.where(st.acc_slot >= 0, acc_base + st.acc_slot * slot_bytes, -1).astype(np.int32),
            np.where(st.wb_slot >= 0, acc_base + st.wb_slot * slot_bytes, -1).astype(np.int32),
            st.drain.astype(np.uint8), st.final.astype(np.uint8), st.valid_macs, sch.keep)
        prog.append(Instruction(mnem, vd=ACC_REGS[ab], vs1=IN_REGS[ib], vs2=W_REGS[wb]), block=block)
        if last_step[st.out_block] == i:
            em.store(st.out_block, ab)
    prog.image_bytes = em.next_addr
    return prog


def build_image(sch: Schedule, prog: LoweredProgram, x: np.ndarray, w: np.ndarray) -> dict[int, bytes]:
    """External-memory contents for ``prog``: each operand set laid out as its
    load instruction expects (VLE16 stripes 2-byte elements across lanes)."""
    in_tab, w_tab = pack_operands(sch.op, x, w)
    p = sch.op.precision
    L = sch.config.lanes
    image = {}
    for seg in prog.segments:
        s = sch.sets[(seg.role, seg.key)]
        tab = in_tab if seg.role == "in" else w_tab
        words = np.where(s.words >= 0, tab[np.maximum(s.words, 0)], 0).astype(np.uint64)
        per_lane = np.stack([words_to_bytes(row, p) for row in words])
        if s.broadcast:
            blob = per_lane[0]
        else:
            blob = per_lane.reshape(L, -1, 2).transpose(1, 0, 2).ravel()
        image[seg.address] = blob.tobytes()
    return image


def gather_outputs(sch: Schedule, prog: LoweredProgram, mem) -> np.ndarray:
    """Read the stored output blocks back (host side, uncounted) into the output tensor."""
    out = np.zeros(int(np.prod(sch.op.output_shape)), np.int64)
    L = sch.config.lanes
    sub = sch.sub
    for addr, b in prog.outputs:
        ids = sch.out_blocks[b]
        n = ids.shape[1] * sub
        raw = mem.peek(addr, L * n * 4).view("<i4").astype(np.int64)
        vals = raw.reshape(n, L).T.reshape(L, ids.shape[1], sub)  # element i -> lane i % L
        m = ids >= 0
        out[ids[m]] = vals[m]
    return out.reshape(sch.op.output_shape)
