"""Command-line front end: ``speedsim asm|run|bench|sweep|report``.

Exit codes: 0 ok, 2 assembly error, 3 oracle mismatch, 4 configuration error.
"""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click

from . import bench
from .dataflow import LoweringError, OperatorSpec, ScheduleError, StrategyError, legal_strategies
from .isa import AssemblyError, ConfigError, Precision, assemble, disassemble
from .machine import BaselineParams, ExecutionError, MachineConfig, new_machine, run as run_program

EXIT_OK, EXIT_ASM, EXIT_MISMATCH, EXIT_CONFIG = 0, 2, 3, 4

CSV_COLUMNS = ["operator", "strategy", "precision", "cycles", "valid_ops", "ops_per_cycle", "ext_bytes", "instr",
               "regs", "name", "repeat", "kind", "lanes", "tile_r", "tile_c", "arith_instr", "ext_bytes_read",
               "ext_bytes_written", "speedup", "access_ratio", "correct"]
SWEEP_COLUMNS = ["lanes", "tile_r", "tile_c", "pes", "operator", "strategy", "precision", "cycles", "valid_ops",
                 "ops_per_cycle", "area_eff_proxy", "ext_bytes", "instr", "regs", "name", "correct"]

DEFAULTS = {
    "machine": {},
    "baseline": {},
    "operators": [],
    "suite": None,
    "strategy": "mixed",
    "precisions": None,
    "n_param": 2,
    "seed": None,
    "run_baseline": True,
    "out_dir": ".",
    "trace": False,
    "sweep": {},
}
MACHINE_KEYS = {"lanes", "tile_r", "tile_c", "vlen_bits", "vrf_bytes_per_lane", "bus_bytes_per_cycle",
                "queue_depth", "mem_bytes"}
BASELINE_KEYS = {"lanes", "datapath_bits_per_lane", "per_instruction_startup_cycles"}
SWEEP_AXES = {"lanes", "tile_r", "tile_c", "vlen_bits", "vrf_bytes_per_lane"}
STRATEGIES = {"mixed", "all", "MM", "FFCS", "CF", "FF"}


class ConfigProblem(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """``--set a.b=value`` with JSON values (bare words stay strings)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigProblem(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigProblem(f"{key}: {p} is not a section")
        node[parts[-1]] = _parse_value(val)
    return cfg


def load_config(path: str | None, overrides=(), seed: int | None = None) -> dict:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigProblem(f"cannot read config {path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigProblem("config must be a JSON object")
    raw = apply_overrides(raw, overrides)
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigProblem(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = {**copy.deepcopy(DEFAULTS), **raw}
    for section, allowed in (("machine", MACHINE_KEYS), ("baseline", BASELINE_KEYS), ("sweep", SWEEP_AXES)):
        if not isinstance(cfg[section], dict):
            raise ConfigProblem(f"{section} must be an object")
        bad = set(cfg[section]) - allowed
        if bad:
            raise ConfigProblem(f"unknown {section} keys: {', '.join(sorted(bad))}")
    if cfg["strategy"] not in STRATEGIES:
        raise ConfigProblem(f"strategy must be one of {sorted(STRATEGIES)}")
    try:
        if cfg["precisions"] is not None:
            cfg["precisions"] = [Precision.from_bits(int(p)).bits for p in cfg["precisions"]]
    except (ConfigError, ValueError, TypeError) as e:
        raise ConfigProblem(f"precisions: {e}") from None
    if seed is not None:
        cfg["seed"] = seed
    if cfg["seed"] is None:
        cfg["seed"] = int(os.environ.get("SPEEDSIM_SEED", "0"))
    machine_config(cfg["machine"])
    baseline_params(cfg["baseline"])
    cfg["entries"] = [e.name for e in entries(cfg)]  # validates operators and the suite name
    return cfg


def machine_config(d: dict) -> MachineConfig:
    try:
        return MachineConfig(**d)
    except (ConfigError, TypeError, ValueError) as e:
        raise ConfigProblem(f"machine: {e}") from None


def baseline_params(d: dict) -> BaselineParams:
    try:
        p = BaselineParams(**d)
    except TypeError as e:
        raise ConfigProblem(f"baseline: {e}") from None
    if p.lanes < 1 or p.datapath_bits_per_lane < 16 or p.per_instruction_startup_cycles < 0:
        raise ConfigProblem("baseline parameters out of range")
    return p


def entries(cfg: dict) -> list[bench.SuiteEntry]:
    out = []
    if cfg["suite"] is not None:
        try:
            out += bench.model_suite(cfg["suite"])
        except bench.SuiteNotFound:
            raise ConfigProblem(f"unknown suite {cfg['suite']!r} (known: {', '.join(bench.suite_names())})") from None
    for i, d in enumerate(cfg["operators"]):
        try:
            d = {"name": f"op{i}", **d}
            out.append(bench.entry_from_dict(d, cfg["precisions"] or (16, 8)))
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigProblem(f"operators[{i}]: {e!r}") from None
    return out


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _strategies(op: OperatorSpec, policy: str):
    if policy == "mixed":
        return [None]
    if policy == "all":
        return list(legal_strategies(op))
    return [policy]


def _job(args) -> dict:
    """One (entry, precision) unit of work; returns plain rows (picklable)."""
    entry, bits, policy, mcfg, bparams, seed, n_param, with_baseline = args
    op = entry.op.with_precision(Precision.from_bits(bits))
    try:
        strategies = _strategies(op, policy)
        rep = bench.compare(op, (op.precision,), strategies, MachineConfig(**mcfg), BaselineParams(**bparams), seed,
                            n_param, baseline=with_baseline)
    except (StrategyError, ScheduleError, LoweringError, ConfigError, bench.UnsupportedPrecision, ValueError) as e:
        return {"error": f"{entry.name} ({op.label()} {op.precision}): {e}"}
    rows = rep.rows()
    for r in rows:
        r["name"] = entry.name
        r["repeat"] = entry.repeat
    checks = []
    p = op.precision
    order = rep.access_ordering(p)
    if order is not None:
        checks.append(("access ordering FF < FFCS < CF < baseline", entry.name, p.bits, order))
    ff = rep.access_ratio(p, "FF")
    if ff is not None:
        checks.append(("FF external access < 50% of baseline", entry.name, p.bits, ff < 0.5))
    for r in rep.runs:
        if r.strategy != "baseline":
            checks.append(("ops_per_cycle <= peak", entry.name, p.bits,
                           r.metrics.ops_per_cycle <= r.peak_ops_per_cycle() + 1e-9))
    return {"rows": rows, "checks": checks}


def _map(fn, work, jobs: int):
    if jobs <= 1 or len(work) <= 1:
        return [fn(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, work))


def run_bench(cfg: dict, jobs: int = 1) -> dict:
    mcfg = machine_config(cfg["machine"]).to_dict()
    bparams = baseline_params(cfg["baseline"])
    bdict = {k: getattr(bparams, k) for k in BASELINE_KEYS}
    work = []
    for e in entries(cfg):
        for bits in cfg["precisions"] or e.precisions:
            work.append((e, bits, cfg["strategy"] if e.strategy is None else e.strategy, mcfg, bdict,
                         cfg["seed"], cfg["n_param"], cfg["run_baseline"]))
    results = _map(_job, work, jobs)
    errors = [r["error"] for r in results if "error" in r]
    if errors:
        raise ConfigProblem("; ".join(errors))
    rows = [row for r in results for row in r["rows"]]
    claims = _claims(rows, [c for r in results for c in r["checks"]])
    return {"config": _echo(cfg), "rows": rows, "claims": claims}


def _claims(rows, checks) -> list[dict]:
    claims = [{"claim": "oracle equivalence", "pass": all(r["correct"] for r in rows),
               "detail": f"{sum(r['correct'] for r in rows)}/{len(rows)} runs bit-exact"}]
    by_claim: dict[str, list] = {}
    for name, entry, bits, ok in checks:
        by_claim.setdefault(name, []).append((entry, bits, ok))
    for name in sorted(by_claim):
        items = by_claim[name]
        failed = [f"{e}@{b}" for e, b, ok in items if not ok]
        claims.append({"claim": name, "pass": not failed,
                       "detail": f"{len(items) - len(failed)}/{len(items)} hold" + (
                           f"; failing: {', '.join(failed)}" if failed else "")})
    # speedup claims per entry (mixed policy rows only make sense one strategy per op)
    sp = {}
    for r in rows:
        if r["speedup"] is not None:
            sp.setdefault((r["name"], r["strategy"]), {})[r["precision"]] = r["speedup"]
    if sp:
        ge1 = [k for k, v in sp.items() if any(s < 1.0 for s in v.values())]
        claims.append({"claim": "speedup >= 1", "pass": not ge1,
                       "detail": f"{len(sp) - len(ge1)}/{len(sp)} hold" + (
                           f"; failing: {', '.join(f'{n}/{s}' for n, s in ge1)}" if ge1 else "")})
        both = {k: v for k, v in sp.items() if 16 in v and 8 in v}
        if both:
            bad = [k for k, v in both.items() if not v[8] > v[16]]
            claims.append({"claim": "speedup at Int8 > speedup at Int16", "pass": not bad,
                           "detail": f"{len(both) - len(bad)}/{len(both)} hold" + (
                               f"; failing: {', '.join(f'{n}/{s}' for n, s in bad)}" if bad else "")})
    return claims


def _echo(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in ("out_dir",)}


def run_sweep(cfg: dict, jobs: int = 1) -> dict:
    axes = {"lanes": [4], "tile_r": [2], "tile_c": [2]}
    axes.update(cfg["sweep"])
    names = sorted(axes)
    for k in names:
        if not isinstance(axes[k], list) or not axes[k]:
            raise ConfigProblem(f"sweep.{k} must be a non-empty list")
    points = [dict(zip(names, vals)) for vals in itertools.product(*(axes[k] for k in names))]
    base = dict(cfg["machine"])
    for pt in points:
        machine_config({**base, **pt})  # reject invalid axis values before running anything
    rows = []
    for pt in points:
        sub = {**cfg, "machine": {**base, **pt}, "run_baseline": False}
        res = run_bench(sub, jobs)
        for r in res["rows"]:
            pes = r["lanes"] * r["tile_r"] * r["tile_c"]
            r["pes"] = pes
            r["area_eff_proxy"] = round(r["ops_per_cycle"] / pes, 6)
            rows.append(r)
    claims = [{"claim": "oracle equivalence", "pass": all(r["correct"] for r in rows),
               "detail": f"{sum(r['correct'] for r in rows)}/{len(rows)} runs bit-exact"}]
    return {"config": _echo(cfg), "rows": rows, "claims": claims}


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def render_markdown(report: dict, columns) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in report["rows"]:
        lines.append("| " + " | ".join(_fmt(r.get(c)) for c in columns) + " |")
    if report.get("claims"):
        lines += ["", "| claim | pass | detail |", "|---|---|---|"]
        for c in report["claims"]:
            lines.append(f"| {c['claim']} | {'PASS' if c['pass'] else 'FAIL'} | {c['detail']} |")
    return "\n".join(lines) + "\n"


def render_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"


def write_report(report: dict, out_dir: str, columns, stem: str = "report") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text(render_csv(report["rows"], columns))
    (out / f"{stem}.json").write_text(render_json({**report, "columns": columns}))


# ---------------------------------------------------------------------------
# click commands
# ---------------------------------------------------------------------------

def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


@click.group()
@click.version_option(package_name="speedsim")
def main():
    """Simulator of a RISC-V vector processor with a multi-precision tensor unit."""


@main.command()
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="binary output (default: SOURCE with .bin)")
@click.option("--list", "listing", is_flag=True, help="print the disassembly of the encoded words")
def asm(source, output, listing):
    """Assemble SOURCE into little-endian 32-bit words."""
    try:
        prog = assemble(Path(source).read_text())
    except AssemblyError as e:
        _fail(EXIT_ASM, f"{source}: {e}")
    words = prog.encode()
    out = Path(output) if output else Path(source).with_suffix(".bin")
    out.write_bytes(b"".join(w.to_bytes(4, "little") for w in words))
    if listing:
        for i, (w, line) in enumerate(zip(words, disassemble(prog).splitlines())):
            click.echo(f"{4 * i:04x}: {w:08x}  {line}")


@main.command("run")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, help="config override key=value")
@click.option("--xreg", multiple=True, help="scalar register preset, e.g. x10=64")
@click.option("--mem", multiple=True, help="preload external memory: ADDR=FILE")
@click.option("--trace", type=click.Path(dir_okay=False), help="write a pipeline trace CSV")
def run_cmd(source, config_path, overrides, xreg, mem, trace):
    """Assemble SOURCE and execute it; print metrics as JSON."""
    try:
        prog = assemble(Path(source).read_text())
    except AssemblyError as e:
        _fail(EXIT_ASM, f"{source}: {e}")
    try:
        cfg = load_config(config_path, overrides)
        regs = {}
        for item in xreg:
            k, v = item.split("=", 1)
            regs[int(k.strip().lower().lstrip("x"))] = int(v, 0)
        image = {}
        for item in mem:
            a, f = item.split("=", 1)
            image[int(a, 0)] = Path(f).read_bytes()
    except (ConfigProblem, ValueError, OSError) as e:
        _fail(EXIT_CONFIG, str(e))
    if regs and len(prog):
        prog.xwrites[0] = {**regs, **prog.xwrites.get(0, {})}
    m = new_machine(machine_config(cfg["machine"]))
    try:
        metrics = run_program(m, prog, image, trace=trace is not None)
    except ExecutionError as e:
        _fail(EXIT_CONFIG, str(e))
    if trace:
        m.write_trace(trace)
    click.echo(json.dumps(metrics.to_dict(), indent=1, sort_keys=True))


def _run_report(kind: str, config_path, overrides, out_dir, jobs, seed):
    try:
        cfg = load_config(config_path, overrides, seed)
        if out_dir is not None:
            cfg["out_dir"] = out_dir
        report = run_bench(cfg, jobs) if kind == "bench" else run_sweep(cfg, jobs)
    except ConfigProblem as e:
        _fail(EXIT_CONFIG, str(e))
    cols = CSV_COLUMNS if kind == "bench" else SWEEP_COLUMNS
    write_report(report, cfg["out_dir"], cols)
    for c in report["claims"]:
        click.echo(f"{'PASS' if c['pass'] else 'FAIL'}  {c['claim']}: {c['detail']}")
    click.echo(f"{len(report['rows'])} rows -> {Path(cfg['out_dir']) / 'report.csv'}")
    if not report["claims"][0]["pass"]:
        _fail(EXIT_MISMATCH, "simulator output differs from the oracle")


_common = [
    click.argument("config_path", required=False, type=click.Path(exists=True, dir_okay=False)),
    click.option("--set", "overrides", multiple=True, help="config override key=value (JSON value)"),
    click.option("--out", "out_dir", type=click.Path(file_okay=False), help="report directory"),
    click.option("--jobs", "-j", default=1, show_default=True, type=click.IntRange(1, 256)),
    click.option("--seed", type=int, help="tensor seed (default: config, then $SPEEDSIM_SEED, then 0)"),
]


def _with_common(f):
    for deco in reversed(_common):
        f = deco(f)
    return f


@main.command("bench")
@_with_common
def bench_cmd(config_path, overrides, out_dir, jobs, seed):
    """Run operators or a model suite on both machines; write report.csv/json."""
    _run_report("bench", config_path, overrides, out_dir, jobs, seed)


@main.command()
@_with_common
def sweep(config_path, overrides, out_dir, jobs, seed):
    """Cartesian sweep over machine axes (lanes, tile_r, tile_c, ...)."""
    _run_report("sweep", config_path, overrides, out_dir, jobs, seed)


@main.command()
@click.argument("report_json", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "md"]), default="md", show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False))
def report(report_json, fmt, output):
    """Re-render a report.json as CSV or a markdown table."""
    try:
        data = json.loads(Path(report_json).read_text())
        cols = data.get("columns", CSV_COLUMNS)
        text = render_csv(data["rows"], cols) if fmt == "csv" else render_markdown(data, cols)
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
        _fail(EXIT_CONFIG, f"not a report: {e}")
    if output:
        Path(output).write_text(text)
    else:
        click.echo(text, nl=False)


@main.command("suites")
def suites_cmd():
    """List the shipped benchmark suites."""
    for name in bench.suite_names():
        click.echo(name)


if __name__ == "__main__":  # pragma: no cover
    main()
