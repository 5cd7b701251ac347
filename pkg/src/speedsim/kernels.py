"""Hot loops of the tensor-unit model.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature.  ``SPEEDSIM_DISABLE_JIT=1`` (or numba being unavailable)
selects the numpy path; ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_JIT = HAS_NUMBA and os.environ.get("SPEEDSIM_DISABLE_JIT", "0") not in ("1", "true", "yes")

_MASK32 = (1 << 32) - 1


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _wrap32(x):
        x = x & 0xFFFFFFFF
        if x >= 0x80000000:
            x -= 0x100000000
        return x

    @njit(cache=True)
    def _load_operand(vrf, lane, addr, nbytes, bits, pp, out):
        word = np.int64(0)
        for b in range(nbytes):
            word |= np.int64(vrf[lane, addr + b]) << (8 * b)
        mask = (np.int64(1) << bits) - 1
        sign = np.int64(1) << (bits - 1)
        for k in range(pp):
            v = (word >> (k * bits)) & mask
            if v & sign:
                v -= np.int64(1) << bits
            out[k] = v

    @njit(cache=True)
    def _load_i32(vrf, lane, addr):
        v = np.int64(0)
        for b in range(4):
            v |= np.int64(vrf[lane, addr + b]) << (8 * b)
        return _wrap32(v)

    @njit(cache=True)
    def _store_i32(vrf, lane, addr, value):
        u = value & 0xFFFFFFFF
        for b in range(4):
            vrf[lane, addr + b] = (u >> (8 * b)) & 0xFF

    @njit(cache=True)
    def _exec_stages_jit(vrf, acc, in_addr, w_addr, acc_addr, wb_addr, drain, bits, pp, keep):
        n_stages, lanes, rows = in_addr.shape
        cols = w_addr.shape[2]
        nbytes = pp * bits // 8
        a_ops = np.zeros((rows, pp), dtype=np.int64)
        b_ops = np.zeros((cols, pp), dtype=np.int64)
        tmp = np.zeros(pp, dtype=np.int64)
        macs = 0
        for s in range(n_stages):
            for l in range(lanes):
                for r in range(rows):
                    a = in_addr[s, l, r]
                    if a >= 0:
                        _load_operand(vrf, l, a, nbytes, bits, pp, tmp)
                        for k in range(pp):
                            a_ops[r, k] = tmp[k]
                for c in range(cols):
                    w = w_addr[s, l, c]
                    if w >= 0:
                        _load_operand(vrf, l, w, nbytes, bits, pp, tmp)
                        for k in range(pp):
                            b_ops[c, k] = tmp[k]
                for r in range(rows):
                    if in_addr[s, l, r] < 0:
                        continue
                    for c in range(cols):
                        if w_addr[s, l, c] < 0:
                            continue
                        macs += pp
                        for k in range(pp):
                            acc[l, r, c, k] = _wrap32(acc[l, r, c, k] + a_ops[r, k] * b_ops[c, k])
                for r in range(rows):
                    for c in range(cols):
                        p = acc_addr[s, l, r, c]
                        if p >= 0:
                            if keep:
                                for k in range(pp):
                                    acc[l, r, c, k] = _wrap32(acc[l, r, c, k] + _load_i32(vrf, l, p + 4 * k))
                            else:
                                acc[l, r, c, 0] = _wrap32(acc[l, r, c, 0] + _load_i32(vrf, l, p))
                if drain[s]:
                    for r in range(rows):
                        for c in range(cols):
                            q = wb_addr[s, l, r, c]
                            if q >= 0:
                                if keep:
                                    for k in range(pp):
                                        _store_i32(vrf, l, q + 4 * k, acc[l, r, c, k])
                                else:
                                    total = np.int64(0)
                                    for k in range(pp):
                                        total += acc[l, r, c, k]
                                    _store_i32(vrf, l, q, _wrap32(total))
                            for k in range(pp):
                                acc[l, r, c, k] = 0
        return macs

    @njit(cache=True)
    def _stage_timing_jit(req, accq, drain, tile_c):
        n = req.shape[0]
        req_free = 0
        acc_free = 0
        drain_free = 0
        last_drain_start = 0
        c_end_prev = 0
        wb_end = 0
        cstart_hist0 = 0  # compute start of stage s-2
        cstart_hist1 = 0  # compute start of stage s-1
        for s in range(n):
            gate = cstart_hist0 if s >= 2 else 0
            r_start = max(req_free, gate)
            r_end = r_start + (1 if req[s] else 0)
            req_free = r_end
            a_end = 0
            if accq[s]:
                a_start = max(acc_free, gate)
                a_end = a_start + 1
                acc_free = a_end
            c_start = max(c_end_prev, r_end)
            if drain[s]:
                c_start = max(c_start, last_drain_start)
            c_end = max(c_start + 1, a_end)
            if drain[s]:
                d_start = max(c_end, drain_free)
                d_end = d_start + tile_c
                drain_free = d_end
                last_drain_start = d_start
                wb_end = max(wb_end, d_end + 1)
            c_end_prev = c_end
            cstart_hist0 = cstart_hist1
            cstart_hist1 = c_start
        return max(c_end_prev, wb_end)


# --------------------------------------------------------------------------
# numpy fallbacks
# --------------------------------------------------------------------------

def _wrap32_np(x: np.ndarray) -> np.ndarray:
    return ((x.astype(np.int64) + (1 << 31)) & _MASK32) - (1 << 31)


def _unpack_np(vrf: np.ndarray, addr: np.ndarray, bits: int, pp: int) -> np.ndarray:
    """addr: (L, n) byte addresses (>= 0 where valid) -> (L, n, pp) signed sub-fields."""
    nbytes = pp * bits // 8
    lanes = addr.shape[0]
    safe = np.where(addr >= 0, addr, 0)
    idx = safe[..., None] + np.arange(nbytes)
    raw = vrf[np.arange(lanes)[:, None, None], idx].astype(np.uint64)
    word = np.zeros(addr.shape, dtype=np.uint64)
    for b in range(nbytes):
        word |= raw[..., b] << np.uint64(8 * b)
    shifts = (np.arange(pp) * bits).astype(np.uint64)
    sub = ((word[..., None] >> shifts) & np.uint64((1 << bits) - 1)).astype(np.int64)
    sub = np.where(sub >= (1 << (bits - 1)), sub - (1 << bits), sub)
    return np.where((addr >= 0)[..., None], sub, 0)


def _load_i32_np(vrf: np.ndarray, lane: np.ndarray, addr: np.ndarray) -> np.ndarray:
    idx = addr[..., None] + np.arange(4)
    raw = vrf[lane[..., None], idx]
    return raw.copy().view("<i4")[..., 0].astype(np.int64)


def _exec_stages_np(vrf, acc, in_addr, w_addr, acc_addr, wb_addr, drain, bits, pp, keep):
    n_stages, lanes, rows = in_addr.shape
    cols = w_addr.shape[2]
    lane_grid = np.broadcast_to(np.arange(lanes)[:, None, None], (lanes, rows, cols))
    full = acc
    acc = full[..., :pp]
    macs = 0
    for s in range(n_stages):
        a = _unpack_np(vrf, in_addr[s], bits, pp)
        b = _unpack_np(vrf, w_addr[s], bits, pp)
        valid = (in_addr[s] >= 0)[:, :, None] & (w_addr[s] >= 0)[:, None, :]
        macs += int(valid.sum()) * pp
        acc[...] = _wrap32_np(acc + a[:, :, None, :] * b[:, None, :, :])
        p = acc_addr[s]
        sel = p >= 0
        if sel.any():
            if keep:
                for k in range(pp):
                    part = _load_i32_np(vrf, lane_grid[sel], p[sel] + 4 * k)
                    acc[..., k][sel] = _wrap32_np(acc[..., k][sel] + part)
            else:
                part = _load_i32_np(vrf, lane_grid[sel], p[sel])
                acc[..., 0][sel] = _wrap32_np(acc[..., 0][sel] + part)
        if drain[s]:
            q = wb_addr[s]
            sel = q >= 0
            if sel.any():
                vals = acc[sel] if keep else _wrap32_np(acc.sum(axis=-1))[sel][:, None]
                width = vals.shape[1]
                raw = vals.astype("<i4").view(np.uint8).reshape(-1, 4 * width)
                idx = q[sel][:, None] + np.arange(4 * width)
                vrf[lane_grid[sel][:, None], idx] = raw
            full[...] = 0
    return macs


def _stage_timing_np(req, accq, drain, tile_c):
    req_free = acc_free = drain_free = last_drain_start = c_end_prev = wb_end = 0
    hist = [0, 0]
    for s in range(len(req)):
        gate = hist[0] if s >= 2 else 0
        r_end = max(req_free, gate) + (1 if req[s] else 0)
        req_free = r_end
        a_end = 0
        if accq[s]:
            a_end = max(acc_free, gate) + 1
            acc_free = a_end
        c_start = max(c_end_prev, r_end)
        if drain[s]:
            c_start = max(c_start, last_drain_start)
        c_end = max(c_start + 1, a_end)
        if drain[s]:
            d_start = max(c_end, drain_free)
            drain_free = d_start + tile_c
            last_drain_start = d_start
            wb_end = max(wb_end, drain_free + 1)
        c_end_prev = c_end
        hist = [hist[1], c_start]
    return max(c_end_prev, wb_end)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def exec_stages(vrf, acc, in_addr, w_addr, acc_addr, wb_addr, drain, bits, pp, keep, *, jit=None):
    """Run a stage block functionally on all lanes.  Mutates ``vrf`` and ``acc``;
    returns the number of MACs performed (operand pairs with both sides present).

    vrf: uint8 (lanes, bytes); acc: int64 (lanes, rows, cols, pp), int32-valued;
    in_addr: int32 (S, lanes, rows); w_addr: int32 (S, lanes, cols);
    acc_addr / wb_addr: int32 (S, lanes, rows, cols); drain: uint8 (S,).
    """
    use = USE_JIT if jit is None else (jit and HAS_NUMBA)
    fn = _exec_stages_jit if use else _exec_stages_np
    return int(fn(vrf, acc, in_addr, w_addr, acc_addr, wb_addr, drain, int(bits), int(pp), bool(keep)))


def stage_timing(req, accq, drain, tile_c, *, jit=None) -> int:
    """Cycles for a stage sequence through request -> compute -> drain -> write-back,
    with two-deep operand queues and a column-per-cycle result shift-out."""
    if len(req) == 0:
        return 0
    use = USE_JIT if jit is None else (jit and HAS_NUMBA)
    fn = _stage_timing_jit if use else _stage_timing_np
    return int(fn(np.asarray(req, np.uint8), np.asarray(accq, np.uint8), np.asarray(drain, np.uint8), int(tile_c)))
