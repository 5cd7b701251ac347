"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with both timings and the speedup, then the same
for a whole simulated operator.  First-call (compile) time is reported
separately and excluded from the steady-state numbers.
"""

import argparse
import time
import timeit

import numpy as np

from speedsim import kernels
from speedsim.bench import run_speed
from speedsim.dataflow import Kind, OperatorSpec
from speedsim.isa import Precision


def stage_block(rng, p, lanes=4, rows=2, cols=2, stages=4096, vrf_bytes=1 << 14):
    ob = p.operand_bytes
    vrf = rng.integers(0, 256, size=(lanes, vrf_bytes), dtype=np.uint8)
    in_addr = rng.integers(0, 4096 - ob, size=(stages, lanes, rows)).astype(np.int32)
    w_addr = rng.integers(4096, 8192 - ob, size=(stages, lanes, cols)).astype(np.int32)
    base = 8192 + 4 * np.arange(rows * cols).reshape(rows, cols)
    out = np.broadcast_to(base, (stages, lanes, rows, cols)).astype(np.int32).copy()
    drain = (np.arange(stages) % 9 == 8).astype(np.uint8)
    acc_addr = np.where(drain[:, None, None, None] == 1, -1, out).astype(np.int32)
    return vrf, in_addr, w_addr, acc_addr, out, drain


def bench(label, fn_jit, fn_np, repeat):
    t0 = time.perf_counter()
    fn_jit()
    first = time.perf_counter() - t0
    tj = min(timeit.repeat(fn_jit, number=1, repeat=repeat))
    tn = min(timeit.repeat(fn_np, number=1, repeat=repeat))
    print(f"{label:<44} numba {tj * 1e3:9.2f} ms   numpy {tn * 1e3:9.2f} ms   x{tn / tj:6.1f}"
          f"   (first call {first * 1e3:.0f} ms)")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    for p in Precision:
        vrf, ia, wa, aa, wb, dr = stage_block(rng, p)

        def go(jit, vrf=vrf, ia=ia, wa=wa, aa=aa, wb=wb, dr=dr, p=p):
            acc = np.zeros((4, 2, 2, p.pp), np.int64)
            kernels.exec_stages(vrf.copy(), acc, ia, wa, aa, wb, dr, p.bits, p.pp, False, jit=jit)

        bench(f"exec_stages {p} 4096 stages", lambda: go(True), lambda: go(False), args.repeat)

    n = 20000
    req = (rng.random(n) < 0.3).astype(np.uint8)
    accq = (rng.random(n) < 0.1).astype(np.uint8)
    drain = (rng.random(n) < 0.1).astype(np.uint8)
    bench(f"stage_timing {n} stages", lambda: kernels.stage_timing(req, accq, drain, 2, jit=True),
          lambda: kernels.stage_timing(req, accq, drain, 2, jit=False), args.repeat)

    # end to end: the dispatcher reads USE_JIT at call time
    ops = [OperatorSpec.conv(16, 16, 16, 16, 3, 1, 1, Precision.INT8),
           OperatorSpec.conv(32, 32, 16, 16, 1, kind=Kind.PWCV), OperatorSpec.mm(64, 64, 64, Precision.INT4)]
    saved = kernels.USE_JIT
    try:
        for op in ops:
            def e2e(flag, op=op):
                kernels.USE_JIT = flag
                run_speed(op)
            bench(f"run_speed {op.label()} {op.precision}", lambda: e2e(True), lambda: e2e(False),
                  max(1, args.repeat // 2))
    finally:
        kernels.USE_JIT = saved


if __name__ == "__main__":
    main()
