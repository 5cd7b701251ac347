import json

import numpy as np
import pytest
from click.testing import CliRunner

from speedsim import bench
from speedsim.cli import apply_overrides, load_config, main
from speedsim.isa import assemble, decode_instruction

SMALL = '[{"name": "mm", "kind": "MM", "M": 8, "K": 8, "N": 8}]'


@pytest.fixture
def runner():
    return CliRunner()


def test_asm_writes_little_endian_words(runner, tmp_path):
    src = tmp_path / "p.s"
    src.write_text("vsacfg x0, 0b001001101, 1  # Int8, k=3, FFCS\nvsam.vv v0, v16, v24\n")
    res = runner.invoke(main, ["asm", str(src), "--list"])
    assert res.exit_code == 0, res.output
    blob = (tmp_path / "p.bin").read_bytes()
    words = [int.from_bytes(blob[i:i + 4], "little") for i in range(0, len(blob), 4)]
    assert words == assemble(src.read_text()).encode()
    assert decode_instruction(words[1]).vs2 == 24
    assert "vsam.vv v0, v16, v24" in res.output


def test_asm_empty_file(runner, tmp_path):
    src = tmp_path / "e.s"
    src.write_text("# nothing\n\n")
    out = tmp_path / "e.out"
    assert runner.invoke(main, ["asm", str(src), "-o", str(out)]).exit_code == 0
    assert out.read_bytes() == b""


def test_asm_error_reports_line_and_exit_2(runner, tmp_path):
    src = tmp_path / "bad.s"
    src.write_text("vsam.vv v0, v1, v2\nvsam.vv v0, v1, v40\n")
    res = runner.invoke(main, ["asm", str(src)])
    assert res.exit_code == 2
    assert "line 2" in res.output


def test_run_prints_metrics_and_trace(runner, tmp_path):
    src = tmp_path / "l.s"
    src.write_text("vsetvli x1, x2, e16, m1\nvle16.v v1, (x3)\n")
    trace = tmp_path / "t.csv"
    res = runner.invoke(main, ["run", str(src), "--xreg", "x2=8", "--trace", str(trace)])
    assert res.exit_code == 0, res.output
    assert json.loads(res.output)["ext_bytes_read"] == 16
    assert trace.read_text().splitlines()[0] == "cycle,stage,instr_index,mnemonic,unit"


def test_overrides_parse_json_and_strings():
    cfg = apply_overrides({}, ["machine.lanes=8", "suite=vgg16_mini", "precisions=[16,4]"])
    assert cfg == {"machine": {"lanes": 8}, "suite": "vgg16_mini", "precisions": [16, 4]}


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("SPEEDSIM_SEED", "7")
    assert load_config(None)["seed"] == 7
    assert load_config(None, ["seed=3"])["seed"] == 3
    assert load_config(None, ["seed=3"], seed=5)["seed"] == 5
    monkeypatch.delenv("SPEEDSIM_SEED")
    assert load_config(None)["seed"] == 0


@pytest.mark.parametrize("override", ["bogus=1", "machine.lanes=3", "machine.warp=1", "strategy=fast",
                                      "suite=alexnet", "precisions=[12]", "sweep.colour=[1]"])
def test_config_errors_exit_4(runner, tmp_path, override):
    res = runner.invoke(main, ["bench", "--set", override, "--out", str(tmp_path)])
    assert res.exit_code == 4, res.output


def test_config_file_unknown_key(runner, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"operators": [], "speed": 9}')
    assert runner.invoke(main, ["bench", str(cfg)]).exit_code == 4


def test_forced_illegal_strategy_exit_4(runner, tmp_path):
    res = runner.invoke(main, ["bench", "--set", f"operators={SMALL}", "--set", "strategy=CF",
                               "--out", str(tmp_path)])
    assert res.exit_code == 4


def test_bench_writes_reports(runner, tmp_path):
    res = runner.invoke(main, ["bench", "--set", f"operators={SMALL}", "--set", "precisions=[16,8,4]",
                               "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    header = (tmp_path / "report.csv").read_text().splitlines()[0].split(",")
    assert header[:9] == ["operator", "strategy", "precision", "cycles", "valid_ops", "ops_per_cycle",
                          "ext_bytes", "instr", "regs"]
    rep = json.loads((tmp_path / "report.json").read_text())
    # MM and baseline at 16/8, MM only at Int4
    assert [(r["strategy"], r["precision"]) for r in rep["rows"]] == [
        ("MM", 16), ("baseline", 16), ("MM", 8), ("baseline", 8), ("MM", 4)]
    assert rep["claims"][0] == {"claim": "oracle equivalence", "pass": True, "detail": "5/5 runs bit-exact"}


def test_bench_is_deterministic_across_jobs(runner, tmp_path):
    ops = '[{"kind": "MM", "M": 8, "K": 8, "N": 8}, {"kind": "PWCV", "cin": 16, "cout": 16, "h": 4, "w": 4, "k": 1}]'
    for d, jobs in (("a", "1"), ("b", "2")):
        res = runner.invoke(main, ["bench", "--set", f"operators={ops}", "--out", str(tmp_path / d), "-j", jobs])
        assert res.exit_code == 0, res.output
    for f in ("report.csv", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_oracle_mismatch_exit_3(runner, tmp_path, monkeypatch):
    real = bench.oracle
    monkeypatch.setattr(bench, "oracle", lambda op, x, w: real(op, x, w) + 1)
    res = runner.invoke(main, ["bench", "--set", f"operators={SMALL}", "--out", str(tmp_path)])
    assert res.exit_code == 3
    rep = json.loads((tmp_path / "report.json").read_text())
    assert not rep["claims"][0]["pass"]


def test_sweep_area_proxy(runner, tmp_path):
    res = runner.invoke(main, ["sweep", "--set", f"operators={SMALL}", "--set", "sweep.lanes=[2,4]",
                               "--set", "precisions=[8]", "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    rows = json.loads((tmp_path / "report.json").read_text())["rows"]
    assert [r["lanes"] for r in rows] == [2, 4]
    for r in rows:
        assert r["pes"] == r["lanes"] * r["tile_r"] * r["tile_c"]
        assert r["area_eff_proxy"] == pytest.approx(r["ops_per_cycle"] / r["pes"], abs=1e-6)


def test_sweep_invalid_axis_exit_4(runner, tmp_path):
    res = runner.invoke(main, ["sweep", "--set", f"operators={SMALL}", "--set", "sweep.tile_c=[3]",
                               "--out", str(tmp_path)])
    assert res.exit_code == 4


def test_report_rerender(runner, tmp_path):
    assert runner.invoke(main, ["bench", "--set", f"operators={SMALL}", "--out", str(tmp_path)]).exit_code == 0
    js = str(tmp_path / "report.json")
    csv_out = runner.invoke(main, ["report", js, "--format", "csv"]).output
    assert csv_out == (tmp_path / "report.csv").read_text()
    md = runner.invoke(main, ["report", js]).output
    assert md.startswith("| operator | strategy |") and "| oracle equivalence | PASS |" in md


def test_report_rejects_garbage(runner, tmp_path):
    f = tmp_path / "x.json"
    f.write_text("[1, 2]")
    assert runner.invoke(main, ["report", str(f)]).exit_code == 4


def test_empty_suite(runner, tmp_path):
    res = runner.invoke(main, ["bench", "--set", "suite=empty", "--out", str(tmp_path)])
    assert res.exit_code == 0
    assert (tmp_path / "report.csv").read_text().count("\n") == 1


def test_suites_listing(runner):
    out = runner.invoke(main, ["suites"]).output.split()
    assert "operators" in out and "vgg16_mini" in out
    assert np.all([n in out for n in bench.suite_names()])


def _sweep(runner, tmp_path, op, axes, prec=16):
    args = ["sweep", "--set", f"operators=[{op}]", "--set", f"precisions=[{prec}]", "--out", str(tmp_path)]
    for k, v in axes.items():
        args += ["--set", f"sweep.{k}={v}"]
    res = runner.invoke(main, args)
    assert res.exit_code == 0, res.output
    return json.loads((tmp_path / "report.json").read_text())["rows"]


def _monotone_in_pes(rows, key):
    by_pes = {}
    for r in rows:
        by_pes.setdefault(r["pes"], []).append(key(r))
    levels = [by_pes[p] for p in sorted(by_pes)]
    return all(max(a) <= min(b) for a, b in zip(levels, levels[1:]))


@pytest.mark.slow
def test_design_space_table_mm(runner, tmp_path):
    rows = _sweep(runner, tmp_path, '{"kind": "MM", "M": 128, "K": 128, "N": 128}',
                  {"lanes": "[2,4,8]", "tile_r": "[2,4,8]", "tile_c": "[2,4,8]"})
    assert len(rows) == 27 and all(r["correct"] for r in rows)
    assert _monotone_in_pes(rows, lambda r: r["ops_per_cycle"])


@pytest.mark.slow
def test_tile_sweep_conv3x3_throughput_monotone(runner, tmp_path):
    rows = _sweep(runner, tmp_path, '{"kind": "CONV", "cin": 32, "cout": 32, "h": 32, "w": 32, "k": 3, "p": 1}',
                  {"lanes": "[4]", "tile_r": "[2,4,8]", "tile_c": "[2,4,8]"})
    assert len(rows) == 9
    assert _monotone_in_pes(rows, lambda r: 1.0 / r["cycles"])


def test_single_point_sweep_equals_bench(runner, tmp_path):
    op = '{"name": "c", "kind": "CONV", "cin": 8, "cout": 8, "h": 8, "w": 8, "k": 3, "p": 1}'
    rows = _sweep(runner, tmp_path / "s", op, {"lanes": "[4]"}, prec=8)
    res = runner.invoke(main, ["bench", "--set", f"operators=[{op}]", "--set", "precisions=[8]",
                               "--set", "run_baseline=false", "--out", str(tmp_path / "b")])
    assert res.exit_code == 0
    brow = json.loads((tmp_path / "b" / "report.json").read_text())["rows"]
    keys = ["operator", "strategy", "precision", "cycles", "valid_ops", "ops_per_cycle", "ext_bytes", "instr", "regs"]
    assert [{k: r[k] for k in keys} for r in rows] == [{k: r[k] for k in keys} for r in brow]


def test_pwcv_bench_ff_below_baseline(runner, tmp_path):
    op = '{"kind": "PWCV", "cin": 16, "cout": 16, "h": 16, "w": 16, "k": 1}'
    res = runner.invoke(main, ["bench", "--set", f"operators=[{op}]", "--set", "strategy=FF", "--out", str(tmp_path)])
    assert res.exit_code == 0
    rows = json.loads((tmp_path / "report.json").read_text())["rows"]
    ff = [r for r in rows if r["strategy"] == "FF"]
    assert ff and all(r["access_ratio"] < 0.5 for r in ff)
    claims = {c["claim"]: c["pass"] for c in json.loads((tmp_path / "report.json").read_text())["claims"]}
    assert claims["FF external access < 50% of baseline"]
