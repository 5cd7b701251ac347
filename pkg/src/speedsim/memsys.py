"""External memory with byte-exact access accounting, and the lane VRF port model."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass

import numpy as np

DEFAULT_MEM_BYTES = 64 * 1024 * 1024


class MemoryFault(Exception):
    def __init__(self, addr: int, length: int, size: int):
        self.addr = addr
        self.length = length
        super().__init__(f"access [{addr:#x}, {addr + length:#x}) outside memory of {size} bytes")


class VrfFault(Exception):
    pass


class VrfPortConflict(Exception):
    pass


class AccessMode(enum.Enum):
    SEQUENTIAL = "sequential"
    BROADCAST = "broadcast"


@dataclass(frozen=True)
class AccessRecord:
    cycle: int
    mode: AccessMode
    address: int
    length_bytes: int
    direction: str  # "r" or "w"


class ExternalMemory:
    """Flat byte-addressable memory; every access is logged, never deduplicated."""

    def __init__(self, size: int = DEFAULT_MEM_BYTES, image: bytes | np.ndarray | None = None):
        self.size = int(size)
        self.data = np.zeros(self.size, dtype=np.uint8)
        self.log: list[AccessRecord] = []
        self.bytes_read = 0
        self.bytes_written = 0
        self.reads_by_mode = {AccessMode.SEQUENTIAL: 0, AccessMode.BROADCAST: 0}
        if image is not None:
            self.load_image(image)

    @property
    def sequential_bytes(self) -> int:
        return self.reads_by_mode[AccessMode.SEQUENTIAL]

    @property
    def broadcast_bytes(self) -> int:
        return self.reads_by_mode[AccessMode.BROADCAST]

    def _check(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > self.size:
            raise MemoryFault(addr, length, self.size)

    def load_image(self, image, base: int = 0) -> None:
        """Host-side initialization; not counted as device traffic."""
        buf = np.frombuffer(bytes(image), dtype=np.uint8) if not isinstance(image, np.ndarray) else image.view(np.uint8).ravel()
        self._check(base, buf.size)
        self.data[base:base + buf.size] = buf

    def peek(self, addr: int, length: int) -> np.ndarray:
        """Host-side read without accounting."""
        self._check(addr, length)
        return self.data[addr:addr + length].copy()

    def read(self, addr: int, length: int, mode: AccessMode = AccessMode.SEQUENTIAL, cycle: int = 0) -> np.ndarray:
        self._check(addr, length)
        if length == 0:
            return np.zeros(0, dtype=np.uint8)
        self.bytes_read += length
        self.reads_by_mode[mode] += length
        self.log.append(AccessRecord(cycle, mode, addr, length, "r"))
        return self.data[addr:addr + length].copy()

    def write(self, addr: int, payload, cycle: int = 0) -> None:
        buf = np.asarray(payload, dtype=np.uint8).ravel()
        self._check(addr, buf.size)
        if buf.size == 0:
            return
        self.data[addr:addr + buf.size] = buf
        self.bytes_written += buf.size
        self.log.append(AccessRecord(cycle, AccessMode.SEQUENTIAL, addr, buf.size, "w"))

    def replay_totals(self) -> tuple[int, int]:
        r = sum(a.length_bytes for a in self.log if a.direction == "r")
        w = sum(a.length_bytes for a in self.log if a.direction == "w")
        return r, w

    def log_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["cycle", "mode", "dir", "addr", "len"])
        for a in self.log:
            w.writerow([a.cycle, a.mode.value, a.direction, a.address, a.length_bytes])
        return out.getvalue()


# convenience aliases matching the operation names
def ext_read(mem: ExternalMemory, addr: int, length: int, mode: AccessMode = AccessMode.SEQUENTIAL,
             cycle: int = 0) -> np.ndarray:
    return mem.read(addr, length, mode, cycle)


def ext_write(mem: ExternalMemory, addr: int, payload, cycle: int = 0) -> None:
    mem.write(addr, payload, cycle)


class PortGroup(enum.Enum):
    REQUEST = "request"
    ACCUMULATE = "accumulate"
    WRITEBACK = "writeback"


class Vrf:
    """One lane's vector register file: 32 registers of ``vlen_bits`` each.

    ``storage`` may be a row of the machine-wide VRF array so lanes share one
    contiguous buffer.  Each port group admits one access per cycle.
    """

    NREGS = 32

    def __init__(self, vlen_bits: int = 4096, storage: np.ndarray | None = None):
        self.reg_bytes = vlen_bits // 8
        self.size = self.NREGS * self.reg_bytes
        if storage is None:
            storage = np.zeros(self.size, dtype=np.uint8)
        if storage.size != self.size:
            raise ValueError("storage size does not match VRF geometry")
        self.data = storage
        self._used: dict[PortGroup, int] = {}
        self.cycle = 0

    def begin_cycle(self, cycle: int) -> None:
        self.cycle = cycle

    def _range(self, reg: int, start: int, stop: int) -> tuple[int, int]:
        if not 0 <= reg < self.NREGS:
            raise VrfFault(f"register v{reg} out of range")
        lo = reg * self.reg_bytes + start
        hi = reg * self.reg_bytes + stop
        if start < 0 or stop < start or hi > self.size:
            raise VrfFault(f"byte range [{start}, {stop}) of v{reg} outside VRF")
        return lo, hi

    def access(self, group: PortGroup, op: str, reg: int, element_range: tuple[int, int],
               data=None):
        """Read or write bytes ``element_range`` (relative to ``reg``; may run into
        the following registers as a register group)."""
        if self._used.get(group) == self.cycle:
            raise VrfPortConflict(f"port group {group.value} already used in cycle {self.cycle}")
        lo, hi = self._range(reg, *element_range)
        self._used[group] = self.cycle
        if op == "read":
            return self.data[lo:hi].copy()
        if op == "write":
            buf = np.asarray(data, dtype=np.uint8).ravel()
            if buf.size != hi - lo:
                raise VrfFault("write payload does not match range")
            self.data[lo:hi] = buf
            return None
        raise ValueError(f"unknown VRF op {op!r}")


def vrf_access(vrf: Vrf, port_group: PortGroup, op: str, reg: int, element_range: tuple[int, int], data=None):
    return vrf.access(port_group, op, reg, element_range, data)
