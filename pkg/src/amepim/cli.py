"""Command-line entry point: ``amepim {run,verify,bench,trace,asm}``.

Exit codes: 0 ok, 1 file error, 2 parse error, 3 unsupported instruction,
4 device or execution error, 5 verification mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import isa, layout, oracle, pep, perf
from .device import DEFAULT_BANK_CAPACITY, DeviceConfig, PseudoChannel
from .errors import AmeError, AmePimError, AssemblyError, ParseError, UnsupportedInstruction
from .frontend import Frontend, parse_instruction, parse_program
from .isa import PepKind

EXIT_OK, EXIT_FILE, EXIT_PARSE, EXIT_UNSUPPORTED, EXIT_DEVICE, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5


@dataclass
class RunConfig:
    program: Optional[str] = None
    input_dir: Optional[str] = None
    output_dir: Optional[str] = None
    freq_mhz: float = perf.DEFAULT_FREQ_MHZ
    cost_table: Optional[str] = None
    trace_out: Optional[str] = None
    oracle: str = "both"
    seed: int = 0
    bank_capacity: int = DEFAULT_BANK_CAPACITY
    broadcast_source: str = "bank0"


def _costs(path) -> perf.PepCostTable:
    return perf.PepCostTable.load(path) if path else perf.DEFAULT_COSTS


# --- run ------------------------------------------------------------------------

def run_program(text: str, cfg: RunConfig, record: bool = False):
    """Execute an AME program; returns (frontend, merged CycleReport, per-instruction rows)."""
    instrs = parse_program(text)
    device = PseudoChannel(DeviceConfig(cfg.bank_capacity, cfg.broadcast_source), record=record)
    fe = Frontend(device)
    costs = _costs(cfg.cost_table)
    in_dir = cfg.input_dir or (os.path.dirname(cfg.program) if cfg.program else ".")
    out_dir = cfg.output_dir or in_dir
    reports, rows = [], []
    for ins in instrs:
        m, ops = ins.mnemonic, ins.operands
        try:
            if m.startswith("msettile"):
                fe.configure(m[len("msettile")], ops[0])
            elif m == "mrelease":
                fe.mrelease()
            elif m in ("mld", "mld.t"):
                mat = layout.read_matrix(os.path.join(in_dir, ops[1]))
                fe.mld(ops[0], mat, transpose=(m == "mld.t"))
            elif m in ("mst", "mst.t"):
                layout.write_matrix(os.path.join(out_dir, ops[1]), fe.mst(ops[0], transpose=(m == "mst.t")))
            else:
                plan = fe.plan(ins)
                fe.execute(plan)
                r = perf.report_for_plan(plan, costs)
                reports.append(r)
                rows.append({"line": ins.line, "instruction": str(ins), **r.to_dict(cfg.freq_mhz)})
        except AmePimError as exc:
            if ins.line is not None and not str(exc).startswith("line"):
                exc.args = (f"line {ins.line}: {exc}",)
            raise
    return fe, perf.merge(reports), rows


def _cmd_run(args) -> int:
    cfg = _config(args)
    with open(args.program) as f:
        text = f.read()
    fe, total, rows = run_program(text, cfg, record=bool(args.trace_out))
    if args.trace_out:
        with open(args.trace_out, "w") as f:
            f.write(fe.device.trace.dumps())
    out = {"report": total.to_dict(cfg.freq_mhz), "instructions": rows}
    if args.format == "csv":
        sys.stdout.write(total.to_csv(cfg.freq_mhz))
    else:
        print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_trace(args) -> int:
    cfg = _config(args)
    with open(args.program) as f:
        text = f.read()
    fe, _, _ = run_program(text, cfg, record=True)
    dump = fe.device.trace.dumps()
    if args.trace_out:
        with open(args.trace_out, "w") as f:
            f.write(dump)
    else:
        sys.stdout.write(dump)
    if args.snapshot_out:
        with open(args.snapshot_out, "wb") as f:
            f.write(fe.device.snapshot())
    return EXIT_OK


# --- verify ---------------------------------------------------------------------

def random_shape(rng: np.random.Generator):
    """(M, K, N) with M uniform in 1..128, K log-uniform over multiples of 8 up to 4096, N log-uniform."""
    m = int(rng.integers(1, 129))
    k = 8 * int(round(math.exp(rng.uniform(0, math.log(512)))))
    n = int(round(math.exp(rng.uniform(0, math.log(128)))))
    return m, min(k, 4096), max(1, min(n, 128))


def verify_gemm(shape, seed: int, broadcast_source: str = "bank0") -> dict:
    m, k, n = shape
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1, 1, (m, k)).astype(np.float16).view(np.uint16)
    B = rng.uniform(-1, 1, (k, n)).astype(np.float16).view(np.uint16)
    fe = Frontend(PseudoChannel(DeviceConfig(broadcast_source=broadcast_source)))
    for d, v in zip("mkn", shape):
        fe.configure(d, v)
    fe.mld("tr0", A)
    fe.mld("tr1", B, transpose=True)
    fe.run(parse_instruction("mfmacc.h acc0, tr0, tr1"))
    got = fe.mst("acc0")
    ref16 = oracle.oracle_gemm(A, B)
    ref64 = oracle.oracle_gemm(A, B, config=oracle.OracleConfig(oracle.OracleMode.FLOAT64))
    ratio = oracle.relative_errors(got, ref64) / oracle.gemm_tolerance(k)
    return {"shape": f"{m}x{k}x{n}", "mismatches": oracle.mismatches(got, ref16),
            "p99_ratio": float(np.percentile(ratio, 99)), "ratios": ratio.ravel().tolist()}


def verify_eltwise(op: str, shape, seed: int) -> dict:
    m, c = shape
    rng = np.random.default_rng(seed)
    A = rng.uniform(-4, 4, (m, c)).astype(np.float16).view(np.uint16)
    B = rng.uniform(-4, 4, (m, c)).astype(np.float16).view(np.uint16)
    fe = Frontend()
    fe.configure("m", m)
    fe.configure("n", c)
    fe.configure("k", c)
    fe.mld("acc1", A)
    fe.mld("acc2", B)
    fe.run(parse_instruction(f"mf{op}.h.mm acc0, acc1, acc2"))
    got = fe.mst("acc0")
    return {"shape": f"{op}:{m}x{c}", "mismatches": oracle.mismatches(got, oracle.oracle_eltwise(op, A, B))}


def _trial(task):
    kind, shape, seed = task
    if kind == "gemm":
        return verify_gemm(shape, seed)
    return verify_eltwise(kind, shape, seed)


def _cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    tasks = []
    if args.shapes:
        for s in args.shapes.split(","):
            tasks.append(("gemm", tuple(int(x) for x in s.lower().split("x")), 0))
    else:
        for _ in range(args.trials):
            tasks.append(("gemm", random_shape(rng), int(rng.integers(2**31))))
    if args.eltwise:
        for t in range(args.trials):
            op = ("add", "sub", "mul")[t % 3]
            shape = (int(rng.integers(1, 129)), int(rng.integers(1, 4097)))
            tasks.append((op, shape, int(rng.integers(2**31))))
    seeds = [(k, s, seed + args.seed) for k, s, seed in tasks]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_trial, seeds))
    else:
        results = [_trial(t) for t in seeds]
    bad = sum(r["mismatches"] for r in results)
    ratios = [x for r in results for x in r.pop("ratios", [])]
    p99 = float(np.percentile(ratios, 99)) if ratios else 0.0
    check64 = args.oracle in ("float64", "both")
    check16 = args.oracle in ("ordered", "both")
    for r in results:
        print(json.dumps(r, sort_keys=True))
    ok = (not check16 or bad == 0) and (not check64 or p99 <= 1.0)
    print(json.dumps({"trials": len(results), "bit_mismatches": bad, "p99_error_over_tolerance": round(p99, 6),
                      "pass": ok}, sort_keys=True))
    return EXIT_OK if ok else EXIT_MISMATCH


# --- bench ----------------------------------------------------------------------------

def instruction_table(freq_mhz: float = perf.DEFAULT_FREQ_MHZ, costs=perf.DEFAULT_COSTS) -> List[dict]:
    """Cycle model of the maximal-size AME instructions (planned, not executed)."""
    fe = Frontend(PseudoChannel(DeviceConfig()))
    for d, v in (("m", 128), ("k", 4096), ("n", 128)):
        fe.configure(d, v)
    t = fe.state.table
    t.remap("tr0", layout.home_region("tr0", 128, 4096))
    t.remap("tr1", layout.home_region("tr1", 128, 4096))
    t.remap("tr2", layout.home_region("tr2", 128, 4096))
    rows = []
    for text in ("mfmacc.h acc0, tr0, tr1", "mfadd.h.mm tr3, tr0, tr2", "mfmul.h.mm tr3, tr0, tr2",
                 "mfsub.h.mm tr3, tr0, tr2"):
        plan = fe.plan(parse_instruction(text))
        r = perf.report(
            [perf.RunCost(run.kind, run.iterations, run.schedule.data_commands) for run in plan.pep_runs()],
            plan.flops, plan.relocation_commands(), 0, costs)
        mnem = text.split()[0]
        rows.append({"shape": "128x4096x128" if mnem == "mfmacc.h" else "128x4096", "instruction": mnem,
                     "iterations": sum(x.iterations for x in plan.pep_runs()), "cycles": r.total_cycles,
                     "flop_per_cycle": round(r.flop_per_cycle, 4), "gflops": round(r.gflops_at(freq_mhz), 4)})
    return rows


def bench_rows(sweep, freq_mhz: float = perf.DEFAULT_FREQ_MHZ, costs=perf.DEFAULT_COSTS) -> List[dict]:
    shapes = []
    for L in sweep:
        shapes.append((128, 8 * L, 1))
    shapes.append((128, 8, 256))
    out = []
    for row in perf.scaling_curve(shapes, freq_mhz, costs):
        out.append({"shape": row.shape, "iterations": row.iterations, "cycles": row.cycles,
                    "flop_per_cycle": round(row.flop_per_cycle, 4), "gflops": round(row.gflops, 4)})
    return out


def _cmd_bench(args) -> int:
    costs = _costs(args.cost_table)
    perf.check_freq(args.freq_mhz)
    sweep = [int(x) for x in args.sweep.split(",")] if args.sweep else list(range(1, 257))
    for L in sweep:
        if not 1 <= L <= 256:
            raise AmeError(f"sweep entries must be 1..256, got {L}")
    rows = bench_rows(sweep, args.freq_mhz, costs)
    if not args.no_instructions:
        rows += instruction_table(args.freq_mhz, costs)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["shape", "iterations", "cycles", "flop_per_cycle", "gflops"],
                       extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        if "instruction" in r:
            r = dict(r, shape=f"{r['instruction']}:{r['shape']}")
        w.writerow(r)
    text = buf.getvalue()
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- asm ---------------------------------------------------------------------------------

_PEP_BUILDERS = {"add": PepKind.ADD_PEP, "mul": PepKind.MUL_PEP, "sub": PepKind.SUB_PEP, "mac": PepKind.MAC_PEP}


def _cmd_asm(args) -> int:
    if args.pep:
        kind = _PEP_BUILDERS[args.pep]
        if kind is PepKind.MAC_PEP:
            run = pep.build_mac_pep(layout.TILE_BASE, layout.STAGING_BASE, layout.TILE_BASE,
                                    pep.MacShape(1, args.iterations))
        else:
            run = pep.build(kind, layout.TILE_BASE, layout.TILE_BASE + layout.SLOT_BYTES, layout.TILE_BASE,
                            args.iterations)
        prog = run.program
    elif args.disassemble:
        with open(args.input, "rb") as f:
            prog = isa.PepProgram.from_image(f.read())
    else:
        with open(args.input) as f:
            prog = isa.assemble(f.read())
    if args.output:
        with open(args.output, "wb") as f:
            f.write(prog.to_image())
    else:
        sys.stdout.write(prog.disassemble())
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------------

def _config(args) -> RunConfig:
    return RunConfig(program=getattr(args, "program", None), input_dir=getattr(args, "input_dir", None),
                     output_dir=getattr(args, "output_dir", None), freq_mhz=perf.check_freq(args.freq_mhz),
                     cost_table=args.cost_table, trace_out=getattr(args, "trace_out", None),
                     bank_capacity=args.bank_capacity, broadcast_source=args.broadcast_source)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amepim", description="AME-on-HBM-PIM functional and cycle simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--freq-mhz", type=float, default=perf.DEFAULT_FREQ_MHZ)
        sp.add_argument("--cost-table", help="key=value cost overrides")

    def device(sp):
        sp.add_argument("--bank-capacity", type=int, default=DEFAULT_BANK_CAPACITY)
        sp.add_argument("--broadcast-source", choices=("bank0", "local"), default="bank0")
        sp.add_argument("--input-dir")
        sp.add_argument("--output-dir")

    r = sub.add_parser("run", help="execute an AME program")
    r.add_argument("program")
    r.add_argument("--trace-out")
    r.add_argument("--format", choices=("json", "csv"), default="json")
    common(r)
    device(r)
    r.set_defaults(func=_cmd_run)

    t = sub.add_parser("trace", help="execute a program and dump the DRAM command trace")
    t.add_argument("program")
    t.add_argument("--trace-out")
    t.add_argument("--snapshot-out")
    common(t)
    device(t)
    t.set_defaults(func=_cmd_trace)

    v = sub.add_parser("verify", help="compare simulator mfmacc against the oracles")
    v.add_argument("--shapes", help="comma-separated MxKxN list (default: random shapes)")
    v.add_argument("--trials", type=int, default=10)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--oracle", choices=("ordered", "float64", "both"), default="both")
    v.add_argument("--eltwise", action="store_true", help="also verify element-wise ops")
    v.add_argument("--jobs", type=int, default=1)
    common(v)
    v.set_defaults(func=_cmd_verify)

    b = sub.add_parser("bench", help="emit the scaling curve and instruction table as CSV")
    b.add_argument("--sweep", help="comma-separated MAC-PEP iteration counts (default 1..256)")
    b.add_argument("--no-instructions", action="store_true")
    b.add_argument("--output")
    common(b)
    b.set_defaults(func=_cmd_bench)

    a = sub.add_parser("asm", help="assemble / disassemble PEP CRF images")
    a.add_argument("input", nargs="?")
    a.add_argument("-d", "--disassemble", action="store_true", help="input is a 128-byte CRF image")
    a.add_argument("-o", "--output", help="write the binary CRF image here")
    a.add_argument("--pep", choices=sorted(_PEP_BUILDERS), help="print a built PEP instead of reading input")
    a.add_argument("--iterations", type=int, default=256)
    a.set_defaults(func=_cmd_asm)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "asm" and not args.pep and not args.input:
        parser.error("asm needs an input file or --pep")
    try:
        return args.func(args)
    except (ParseError, AssemblyError) as exc:
        code, exc_ = EXIT_PARSE, exc
    except UnsupportedInstruction as exc:
        code, exc_ = EXIT_UNSUPPORTED, exc
    except OSError as exc:
        code, exc_ = EXIT_FILE, exc
    except (AmePimError, ValueError) as exc:
        code, exc_ = EXIT_DEVICE, exc
    print(f"amepim: error: {exc_}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
