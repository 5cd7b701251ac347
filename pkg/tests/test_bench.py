import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speedsim.bench import (BaselineParams, SuiteEntry, SuiteNotFound, UnsupportedPrecision, baseline_lower, compare,
                            im2col, model_suite, oracle_conv, oracle_conv_im2col, oracle_mac_count, oracle_mm,
                            oracle_mm_kij, random_tensors, run_baseline, run_entry, run_speed, space_to_depth,
                            suite_names)
from speedsim.dataflow import Kind, OperatorSpec
from speedsim.isa import Mnemonic, Precision
from speedsim.machine import MachineConfig

P16, P8, P4 = Precision.INT16, Precision.INT8, Precision.INT4


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def test_conv_identity_kernel():
    op = OperatorSpec.conv(1, 1, 3, 3, 1)
    x = np.arange(9).reshape(1, 3, 3)
    assert np.array_equal(oracle_conv(op, x, np.ones((1, 1, 1, 1))), x)


def test_conv_all_ones():
    op = OperatorSpec.conv(1, 1, 3, 3, 3)
    assert oracle_conv(op, np.ones((1, 3, 3)), np.ones((1, 1, 3, 3))).tolist() == [[[9]]]


def test_conv_shape_mismatch():
    op = OperatorSpec.conv(2, 1, 3, 3, 1)
    with pytest.raises(ValueError):
        oracle_conv(op, np.ones((1, 3, 3)), np.ones((1, 2, 1, 1)))


@st.composite
def conv_ops(draw):
    k = draw(st.sampled_from([1, 2, 3, 5]))
    p = draw(st.integers(0, k // 2))
    h = draw(st.integers(max(1, k - 2 * p), 10))
    c = draw(st.integers(1, 6))
    prec = draw(st.sampled_from(list(Precision)))
    s = draw(st.integers(1, 3))
    if draw(st.booleans()):
        return OperatorSpec.dwcv(c, h, h, k, s, p, prec)
    return OperatorSpec.conv(c, draw(st.integers(1, 5)), h, h, k, s, p, prec)


@settings(max_examples=60, deadline=None)
@given(op=conv_ops(), seed=st.integers(0, 1000))
def test_direct_conv_agrees_with_im2col(op, seed):
    x, w = random_tensors(op, np.random.default_rng(seed))
    assert np.array_equal(oracle_conv(op, x, w), oracle_conv_im2col(op, x, w))


def test_im2col_shape():
    op = OperatorSpec.conv(3, 1, 5, 5, 3, 2, 1)
    assert im2col(op, np.zeros(op.input_shape)).shape == (27, 9)


def test_mm_identity_and_scalars():
    a = np.random.default_rng(0).integers(-100, 100, (5, 5))
    assert np.array_equal(oracle_mm(np.eye(5, dtype=np.int64), a), a)
    assert oracle_mm([[3]], [[-4]]).tolist() == [[-12]]
    with pytest.raises(ValueError):
        oracle_mm(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 8), k=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 1000))
def test_mm_loop_orders_agree(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(-(2**15), 2**15, (m, k))
    b = rng.integers(-(2**15), 2**15, (k, n))
    assert np.array_equal(oracle_mm(a, b), oracle_mm_kij(a, b))


def test_mm_wraps_to_32_bits():
    a = np.full((1, 4), -(2**15))
    b = np.full((4, 1), -(2**15))
    # 4 * 2^30 = 2^32 wraps to 0
    assert oracle_mm(a, b).item() == 0


def test_mac_count_excludes_padding():
    assert oracle_mac_count(OperatorSpec.conv(1, 1, 3, 3, 3, 1, 1)) == 49  # 7 valid taps per axis
    assert oracle_mac_count(OperatorSpec.conv(2, 3, 3, 3, 3)) == 2 * 3 * 9
    assert oracle_mac_count(OperatorSpec.mm(2, 3, 4)) == 24


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def _count(prog, m):
    return sum(1 for i in prog.instructions if i.mnemonic is m)


def test_baseline_mm_4x4x8_pattern():
    prog = baseline_lower(OperatorSpec.mm(4, 4, 8))
    assert _count(prog, Mnemonic.VMACC) == 16
    assert _count(prog, Mnemonic.VSE) == 4


def test_baseline_single_mac():
    op = OperatorSpec.conv(1, 1, 1, 1, 1, kind=Kind.PWCV)
    assert _count(baseline_lower(op), Mnemonic.VMACC) == 1
    r = run_baseline(op, x=np.array([[[5]]]), w=np.array([[[[-6]]]]))
    assert r.output.item() == -30


def test_baseline_rejects_int4():
    with pytest.raises(UnsupportedPrecision):
        baseline_lower(OperatorSpec.mm(2, 2, 2, P4))


def test_baseline_peak_matches_tensor_unit():
    assert BaselineParams().peak_macs_per_cycle(P16) == 16 == MachineConfig().peak_macs_per_cycle(P16)


@settings(max_examples=25, deadline=None)
@given(op=conv_ops().filter(lambda o: o.precision is not P4), seed=st.integers(0, 1000))
def test_baseline_matches_oracle(op, seed):
    assert run_baseline(op, seed=seed).correct


def test_baseline_collapses_on_small_tensors():
    opc = [run_baseline(OperatorSpec.conv(16, 16, n, n, 1, kind=Kind.PWCV)).metrics.ops_per_cycle
           for n in (4, 8, 16)]
    assert opc[0] < opc[1] < opc[2]


def test_startup_cycles_are_a_parameter():
    op = OperatorSpec.mm(4, 4, 8)
    slow = run_baseline(op, BaselineParams(per_instruction_startup_cycles=12)).metrics.cycles
    assert slow > run_baseline(op).metrics.cycles


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------

def test_space_to_depth_is_exact():
    op = OperatorSpec.conv(2, 3, 13, 11, 7, 5, 2)
    x, w = random_tensors(op, np.random.default_rng(0))
    op2, x2, w2 = space_to_depth(op, x, w)
    assert op2.stride == 1 and op2.in_channels == 50
    assert np.array_equal(oracle_conv(op2, x2, w2), oracle_conv(op, x, w))
    r = run_speed(op, x=x, w=w)
    assert r.correct and r.metrics.valid_ops == 2 * oracle_mac_count(op)


def test_narrow_mm_runs_transposed():
    r = run_speed(OperatorSpec.mm(1, 40, 30))
    assert r.correct and r.metrics.valid_ops == 2 * 1200


def test_compare_degenerate_conv():
    rep = compare(OperatorSpec.conv(1, 1, 1, 1, 1, kind=Kind.PWCV), precisions=(P16, P8, P4))
    assert rep.all_correct
    assert {r.strategy for r in rep.runs} == {"FFCS", "CF", "FF", "baseline"}
    assert rep.get(P4, "baseline") is None


def test_compare_pwcv_access_ordering():
    rep = compare(OperatorSpec.conv(16, 16, 16, 16, 1, kind=Kind.PWCV), precisions=(P16, P8))
    assert rep.all_correct
    assert rep.access_ordering(P16) and rep.access_ordering(P8)


def test_mm_precision_ratio():
    rep = compare(OperatorSpec.mm(32, 64, 32), precisions=(P16, P8))
    ratio = rep.get(P8, "MM").metrics.ops_per_cycle / rep.get(P16, "MM").metrics.ops_per_cycle
    assert 2.0 <= ratio <= 4.0


def test_operator_suite_speedups():
    # speedup >= 1 everywhere and larger at Int8 than at Int16 (baseline has no packing gain)
    for entry in model_suite("operators"):
        rep = run_entry(SuiteEntry(entry.name, entry.op, None, (16, 8)))
        assert rep.all_correct
        s16 = rep.speedup(P16, rep.runs[0].strategy)
        s8 = rep.speedup(P8, rep.runs[0].strategy)
        assert s16 >= 1.0, entry.name
        assert s8 > s16, entry.name


def test_peak_bound_holds():
    for op in (OperatorSpec.mm(16, 64, 16), OperatorSpec.conv(32, 16, 8, 8, 3, 1, 1)):
        for p in Precision:
            r = run_speed(op.with_precision(p))
            assert r.metrics.ops_per_cycle <= r.peak_ops_per_cycle()


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def test_vgg16_first_layer():
    first = model_suite("vgg16")[0].op
    assert (first.kind, first.kh, first.in_channels, first.out_channels, first.height) == (Kind.CONV, 3, 3, 64, 224)


def test_vgg16_conv_parameter_count():
    # published figure: 14,710,464 conv weights (138M total is dominated by the FC layers)
    convs = [e.op for e in model_suite("vgg16") if e.op.kind is not Kind.MM]
    assert len(convs) == 13
    assert sum(int(np.prod(o.weight_shape)) for o in convs) == 14_710_464


def test_resnet18_conv_parameter_count():
    # 11,689,512 total minus 513,000 fc and 9,600 batch-norm parameters
    convs = [e.op for e in model_suite("resnet18") if e.op.kind is not Kind.MM]
    assert sum(int(np.prod(o.weight_shape)) for o in convs) == 11_166_912


def test_mobilenetv2_has_strided_depthwise():
    assert any(e.op.kind is Kind.DWCV and e.op.kh == 3 and e.op.stride == 2 for e in model_suite("mobilenetv2"))


def test_suite_catalogue():
    names = suite_names()
    for base in ("vgg16", "resnet18", "googlenet", "mobilenetv2", "vit_tiny", "vit_b16"):
        assert base in names and f"{base}_mini" in names
    assert model_suite("empty") == []
    with pytest.raises(SuiteNotFound):
        model_suite("alexnet")


def test_vit_attention_repeats_per_head():
    qk = [e for e in model_suite("vit_tiny") if e.name == "block0.attn_qk"][0]
    assert qk.repeat == 3 and (qk.op.M, qk.op.K, qk.op.N) == (197, 64, 197)
