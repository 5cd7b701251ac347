import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speedsim.isa import Precision
from speedsim.memsys import PortGroup, VrfFault
from speedsim.mptu import (ArithmeticContractError, OperandRequester, PackedOperand, StageRequest,
                           TensorCore, pack_words, pe_mac, unpack_words, wrap32)

P16, P8, P4 = Precision.INT16, Precision.INT8, Precision.INT4


def _oracle_mac(p, a, b, acc):
    # plain python big ints, wrapped at the end
    out = []
    for s, x, y in zip(acc, a, b):
        v = (s + x * y) % (1 << 32)
        out.append(v - (1 << 32) if v >= 1 << 31 else v)
    return out


def test_pe_mac_int16():
    r = pe_mac(P16, PackedOperand.pack([3], P16), PackedOperand.pack([5], P16), [7])
    assert r == [22]


def test_pe_mac_int8():
    a = PackedOperand.pack([1, 2, 3, 4], P8)
    b = PackedOperand.pack([5, 6, 7, 8], P8)
    assert pe_mac(P8, a, b, [0, 0, 0, 0]) == [5, 12, 21, 32]


def test_pe_mac_int4_sign():
    a = PackedOperand.pack([-3] + [1] * 15, P4)
    b = PackedOperand.pack([2] * 16, P4)
    assert pe_mac(P4, a, b, [0] * 16) == [-6] + [2] * 15


def test_pe_mac_wraps():
    a = PackedOperand.pack([32767], P16)
    assert pe_mac(P16, a, a, [2**31 - 1]) == [_oracle_mac(P16, [32767], [32767], [2**31 - 1])[0]]
    assert wrap32(2**31) == -2**31


def test_pe_mac_precision_mismatch():
    with pytest.raises(ArithmeticContractError):
        pe_mac(P8, PackedOperand.pack([1], P16), PackedOperand.pack([1, 2, 3, 4], P8), [0] * 4)


@settings(max_examples=10_000, deadline=None)
@given(st.sampled_from([P16, P8, P4]), st.data())
def test_pe_mac_matches_bigint(p, data):
    vals = st.integers(p.lo, p.hi)
    a = data.draw(st.lists(vals, min_size=p.pp, max_size=p.pp))
    b = data.draw(st.lists(vals, min_size=p.pp, max_size=p.pp))
    acc = data.draw(st.lists(st.integers(-2**31, 2**31 - 1), min_size=p.pp, max_size=p.pp))
    got = pe_mac(p, PackedOperand.pack(a, p), PackedOperand.pack(b, p), acc)
    assert got == _oracle_mac(p, a, b, acc)


@given(st.sampled_from([P16, P8, P4]), st.data())
def test_pack_unpack_round_trip(p, data):
    vals = data.draw(st.lists(st.integers(p.lo, p.hi), min_size=p.pp * 3, max_size=p.pp * 3))
    arr = np.array(vals).reshape(3, p.pp)
    assert (unpack_words(pack_words(arr, p), p) == arr).all()
    assert PackedOperand.pack(vals[:p.pp], p).lanes == vals[:p.pp]


def _ops(vals, p=P16):
    return [PackedOperand.pack([v], p) for v in vals]


def test_core_two_cycles_then_drain():
    core = TensorCore(2, 2, P16)
    assert core.core_cycle(_ops([1, 2]), _ops([10, 100])) is None
    assert core.acc[:, :, 0].tolist() == [[10, 100], [20, 200]]
    out = core.core_cycle(_ops([3, 4]), _ops([1, 1]), complete=True)
    assert out[:, :, 0].tolist() == [[13, 103], [24, 204]]
    assert not core.acc.any()


def test_core_drain_latency_is_tile_c():
    assert TensorCore(4, 4).drain_cycles() == 4
    assert TensorCore(2, 8).drain_cycles() == 8


def test_core_rejects_wrong_precision():
    core = TensorCore(2, 2, P8)
    with pytest.raises(ArithmeticContractError):
        core.core_cycle(_ops([1, 2]), _ops([1, 2]))


def test_requester_same_cycle_all_kinds():
    rq = OperandRequester(vrf_bytes=1024)
    acts = rq.operand_request(StageRequest(inputs=[0, 2], weights=[64, 66], accumulation=[128]), cycle=3)
    assert [a.queue for a in acts] == ["weights", "inputs", "accumulation"]
    assert {a.port for a in acts} == {PortGroup.REQUEST, PortGroup.ACCUMULATE}
    assert all(a.cycle == 3 for a in acts)


def test_requester_bad_address():
    rq = OperandRequester(vrf_bytes=1024)
    with pytest.raises(VrfFault):
        rq.operand_request(StageRequest(inputs=[1024]))


def test_core_int8_cycle_counts_sixteen_macs():
    core = TensorCore(2, 2, P8)
    ins = [PackedOperand.pack([1, 2, 3, 4], P8)] * 2
    ws = [PackedOperand.pack([1, 1, 1, 1], P8)] * 2
    core.core_cycle(ins, ws)
    assert core.macs == 16
    assert core.acc[0, 0, :4].tolist() == [1, 2, 3, 4]


def test_drain_untouched_core_is_zero():
    out = TensorCore(2, 4, P4).drain()
    assert out.shape == (2, 4, 16) and not out.any()


def test_requester_reused_inputs_fetch_only_weights():
    rq = OperandRequester(vrf_bytes=1024)
    acts = rq.operand_request(StageRequest(inputs=None, weights=[64, 66]))
    assert [a.queue for a in acts] == ["weights"]


def test_requester_empty_stage():
    assert OperandRequester(vrf_bytes=1024).operand_request(StageRequest()) == []
