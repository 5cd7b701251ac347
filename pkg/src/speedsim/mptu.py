"""Multi-precision tensor unit: packed operands, PE MACs, the PE array and its requester."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .isa import Precision
from .memsys import PortGroup, VrfFault


class ArithmeticContractError(Exception):
    pass


class StateError(Exception):
    pass


def wrap32(x):
    """Two's-complement wrap to int32 (scalar or array)."""
    if isinstance(x, np.ndarray):
        return ((x.astype(np.int64) + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)
    return ((int(x) + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)


@dataclass(frozen=True)
class PackedOperand:
    """PP signed sub-fields of ``precision.bits`` each, sub-field 0 in the low bits."""

    bits: int
    precision: Precision

    def __post_init__(self):
        if not 0 <= self.bits < 1 << self.precision.operand_bits:
            raise ValueError(f"{self.bits:#x} does not fit a {self.precision} packed operand")

    @classmethod
    def pack(cls, values, precision: Precision) -> "PackedOperand":
        vals = [int(v) for v in values]
        if len(vals) != precision.pp:
            raise ValueError(f"{precision} packs {precision.pp} values, got {len(vals)}")
        word = 0
        mask = (1 << precision.bits) - 1
        for k, v in enumerate(vals):
            if not precision.lo <= v <= precision.hi:
                raise ValueError(f"value {v} out of range for {precision}")
            word |= (v & mask) << (k * precision.bits)
        return cls(word, precision)

    @property
    def lanes(self) -> list[int]:
        b = self.precision.bits
        out = []
        for k in range(self.precision.pp):
            v = (self.bits >> (k * b)) & ((1 << b) - 1)
            out.append(v - (1 << b) if v >> (b - 1) else v)
        return out


def pack_words(values: np.ndarray, precision: Precision) -> np.ndarray:
    """Pack the last axis (length PP) of a signed integer array into uint64 words."""
    v = np.asarray(values, dtype=np.int64)
    if v.shape[-1] != precision.pp:
        raise ValueError("last axis must have length PP")
    b = precision.bits
    u = (v & ((1 << b) - 1)).astype(np.uint64)
    shifts = (np.arange(precision.pp) * b).astype(np.uint64)
    return np.bitwise_or.reduce(u << shifts, axis=-1)


def unpack_words(words: np.ndarray, precision: Precision) -> np.ndarray:
    b = precision.bits
    w = np.asarray(words, dtype=np.uint64)
    shifts = (np.arange(precision.pp) * b).astype(np.uint64)
    sub = ((w[..., None] >> shifts) & np.uint64((1 << b) - 1)).astype(np.int64)
    return np.where(sub >= 1 << (b - 1), sub - (1 << b), sub)


def words_to_bytes(words: np.ndarray, precision: Precision) -> np.ndarray:
    """Little-endian byte image of packed words, ``operand_bytes`` per word."""
    nb = precision.operand_bytes
    w = np.asarray(words, dtype=np.uint64).ravel()
    return (w[:, None] >> (np.arange(nb, dtype=np.uint64) * np.uint64(8))).astype(np.uint8).ravel()


def pe_mac(precision: Precision, a: PackedOperand, b: PackedOperand, acc) -> list[int]:
    if a.precision is not precision or b.precision is not precision:
        raise ArithmeticContractError(f"operand precision mismatch: {a.precision}/{b.precision} vs {precision}")
    if len(acc) != precision.pp:
        raise ArithmeticContractError(f"expected {precision.pp} accumulators, got {len(acc)}")
    return [wrap32(int(s) + x * y) for s, x, y in zip(acc, a.lanes, b.lanes)]


class Phase(enum.Enum):
    ACCUMULATING = "accumulating"
    DRAINING = "draining"


class TensorCore:
    """tile_r x tile_c grid of PEs with PP 32-bit accumulators each (output stationary)."""

    def __init__(self, tile_r: int, tile_c: int, precision: Precision = Precision.INT16,
                 acc: np.ndarray | None = None):
        self.tile_r = tile_r
        self.tile_c = tile_c
        self.precision = precision
        shape = (tile_r, tile_c, 16)
        self.acc = np.zeros(shape, dtype=np.int64) if acc is None else acc
        self.phase = Phase.ACCUMULATING
        self.macs = 0
        self.cycles = 0

    @property
    def pp(self) -> int:
        return self.precision.pp

    def configure(self, precision: Precision) -> None:
        if precision is not self.precision and np.any(self.acc):
            raise StateError("precision change with live accumulators")
        self.precision = precision

    def core_cycle(self, inputs, weights, accumulate_external=None, complete: bool = False):
        """One array cycle; returns drained results when ``complete`` is set."""
        if len(inputs) != self.tile_r or len(weights) != self.tile_c:
            raise ArithmeticContractError("operand count does not match tile shape")
        p = self.precision
        for op in (*inputs, *weights):
            if op.precision is not p:
                raise ArithmeticContractError(f"operand {op.precision} on a core configured for {p}")
        if self.phase is Phase.DRAINING:
            raise StateError("core is draining")
        a = np.array([op.lanes for op in inputs], dtype=np.int64)
        b = np.array([op.lanes for op in weights], dtype=np.int64)
        view = self.acc[:, :, :p.pp]
        view[...] = wrap32(view + a[:, None, :] * b[None, :, :])
        if accumulate_external is not None:
            ext = np.asarray(accumulate_external, dtype=np.int64).reshape(self.tile_r, self.tile_c, p.pp)
            view[...] = wrap32(view + ext)
        self.macs += self.tile_r * self.tile_c * p.pp
        self.cycles += 1
        if complete:
            self.phase = Phase.DRAINING
            return self.drain()
        return None

    def drain(self) -> np.ndarray:
        """Row-major (tile_r, tile_c, PP) results; zeroes the accumulators."""
        out = self.acc[:, :, :self.pp].copy()
        self.acc[...] = 0
        self.phase = Phase.ACCUMULATING
        return out

    def drain_cycles(self) -> int:
        # one result column shifted out per cycle
        return self.tile_c

    def fill_latency(self) -> int:
        return self.tile_r + self.tile_c - 2


@dataclass
class StageRequest:
    """Operand needs of one stage: VRF byte addresses, or None to reuse queue contents."""

    inputs: list[int] | None = None
    weights: list[int] | None = None
    accumulation: list[int] | None = None


@dataclass
class RequestAction:
    cycle: int
    queue: str
    port: PortGroup
    addresses: list[int] = field(default_factory=list)


class OperandRequester:
    """Address generator plus fixed-priority arbiter (weights > inputs > accumulation).

    Input and weight sets travel through the request port group as one wide
    access per stage; accumulation data uses its own port group, so all three
    kinds can be served in the same cycle.
    """

    PRIORITY = ("weights", "inputs", "accumulation")

    def __init__(self, vrf_bytes: int, queue_depth: int = 2):
        self.vrf_bytes = vrf_bytes
        self.queue_depth = queue_depth
        self.occupancy = {"inputs": 0, "weights": 0, "accumulation": 0}

    def _check(self, addrs: list[int]) -> None:
        for a in addrs:
            if a < 0 or a >= self.vrf_bytes:
                raise VrfFault(f"operand address {a} outside VRF")

    def operand_request(self, stage: StageRequest, cycle: int = 0) -> list[RequestAction]:
        actions = []
        for queue in self.PRIORITY:
            addrs = getattr(stage, queue)
            if addrs is None:
                continue
            self._check(addrs)
            if self.occupancy[queue] >= self.queue_depth:
                raise StateError(f"{queue} queue full")
            port = PortGroup.ACCUMULATE if queue == "accumulation" else PortGroup.REQUEST
            actions.append(RequestAction(cycle, queue, port, list(addrs)))
            self.occupancy[queue] += 1
        return actions

    def consume(self) -> None:
        for q in self.occupancy:
            self.occupancy[q] = max(0, self.occupancy[q] - 1)


def operand_request(requester: OperandRequester, stage: StageRequest, cycle: int = 0) -> list[RequestAction]:
    return requester.operand_request(stage, cycle)
