import csv
import io
import json

import numpy as np
import pytest

from amepim import cli, isa, layout as L, oracle
from amepim.device import CommandTrace, DeviceConfig, PseudoChannel
from amepim.isa import PepKind


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def gemm_dir(tmp_path, rng):
    A = rng.uniform(-1, 1, (32, 16)).astype(np.float16).view(np.uint16)
    B = rng.uniform(-1, 1, (16, 8)).astype(np.float16).view(np.uint16)
    L.write_matrix(tmp_path / "a.mat", A)
    L.write_matrix(tmp_path / "bt.mat", np.ascontiguousarray(B.T))
    (tmp_path / "gemm.ame").write_text(
        "msettilem 32\nmsettilek 16\nmsettilen 8\n"
        "mld tr0 a.mat\nmld tr1 bt.mat\n"
        "mfmacc.h acc0, tr0, tr1\nmst acc0 c.mat\nmrelease\n")
    return tmp_path, A, B


def test_run_executes_and_reports(capsys, gemm_dir):
    d, A, B = gemm_dir
    code, out, _ = run_cli(capsys, "run", str(d / "gemm.ame"))
    assert code == cli.EXIT_OK
    rep = json.loads(out)
    assert rep["report"]["flops"] == 2 * 32 * 16 * 8
    assert rep["report"]["pep_runs"] == 1
    assert len(rep["instructions"]) == 1 and rep["instructions"][0]["line"] == 6
    assert np.array_equal(L.read_matrix(d / "c.mat"), oracle.oracle_gemm(A, B))


def test_run_csv_format(capsys, gemm_dir):
    d, _, _ = gemm_dir
    code, out, _ = run_cli(capsys, "run", str(d / "gemm.ame"), "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 1 and int(rows[0]["pep_runs"]) == 1


def test_run_is_deterministic(capsys, gemm_dir):
    d, _, _ = gemm_dir
    outs = []
    for i in range(2):
        run_cli(capsys, "run", str(d / "gemm.ame"), "--trace-out", str(d / f"t{i}.txt"))
        outs.append(((d / "c.mat").read_bytes(), (d / f"t{i}.txt").read_text()))
    assert outs[0] == outs[1]


def test_empty_program(capsys, tmp_path):
    p = tmp_path / "empty.ame"
    p.write_text("# nothing here\n\n")
    code, out, _ = run_cli(capsys, "run", str(p))
    assert code == 0
    rep = json.loads(out)["report"]
    assert rep["total_cycles"] == 0 and rep["flop_per_cycle"] == 0.0


def test_exit_codes(capsys, tmp_path, gemm_dir):
    d, _, _ = gemm_dir
    assert run_cli(capsys, "run", str(tmp_path / "missing.ame"))[0] == cli.EXIT_FILE
    bad = tmp_path / "bad.ame"
    bad.write_text("msettilem 4\nmfdiv.h.mm acc0, acc1, acc2\n")
    code, _, err = run_cli(capsys, "run", str(bad))
    assert code == cli.EXIT_PARSE and "line 2" in err
    uns = tmp_path / "uns.ame"
    uns.write_text("msettilem 4\nmfmax.h.mm acc0, acc1, acc2\n")
    code, _, err = run_cli(capsys, "run", str(uns))
    assert code == cli.EXIT_UNSUPPORTED and "Not supported" in err
    dev = tmp_path / "dev.ame"
    dev.write_text("msettilem 129\n")
    assert run_cli(capsys, "run", str(dev))[0] == cli.EXIT_DEVICE
    nofile = tmp_path / "nofile.ame"
    nofile.write_text("msettilem 4\nmsettilek 4\nmld tr0 nope.mat\n")
    assert run_cli(capsys, "run", str(nofile))[0] == cli.EXIT_FILE
    assert run_cli(capsys, "run", str(d / "gemm.ame"), "--freq-mhz", "400")[0] == cli.EXIT_DEVICE


def test_verify_mismatch_exit_code(capsys, monkeypatch):
    real = cli.verify_gemm

    def corrupted(shape, seed, broadcast_source="bank0"):
        r = real(shape, seed, broadcast_source)
        r["mismatches"] += 1
        return r

    monkeypatch.setattr(cli, "verify_gemm", corrupted)
    code, out, _ = run_cli(capsys, "verify", "--shapes", "8x8x2", "--oracle", "ordered")
    assert code == cli.EXIT_MISMATCH
    assert json.loads(out.splitlines()[-1])["pass"] is False


def test_verify_smoke(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "verify", "--shapes", "16x32x4,128x8x1", "--trials", "3", "--eltwise",
                           "--oracle", "ordered")
    assert code == 0
    lines = [json.loads(x) for x in out.splitlines()]
    assert len(lines) == 2 + 3 + 1
    assert lines[-1]["pass"] is True and lines[-1]["bit_mismatches"] == 0
    # the cost table only affects cycle counts, never numerics
    costs = tmp_path / "costs.txt"
    costs.write_text("mac.exec256 = 1\n")
    assert run_cli(capsys, "verify", "--shapes", "16x32x4", "--cost-table", str(costs), "--oracle", "ordered")[0] == 0


def test_verify_float64_bound_on_wide_sample(capsys):
    # the float64 check is a 99th-percentile statistic; give it a few thousand elements
    code, out, _ = run_cli(capsys, "verify", "--shapes", "128x512x16,128x64x32", "--oracle", "float64")
    summary = json.loads(out.splitlines()[-1])
    assert code == 0 and summary["p99_error_over_tolerance"] <= 1.0


def test_random_shapes_in_range():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m, k, n = cli.random_shape(rng)
        assert 1 <= m <= 128 and 8 <= k <= 4096 and k % 8 == 0 and 1 <= n <= 128


def test_bench_rows(capsys, tmp_path):
    out = tmp_path / "bench.csv"
    code, _, _ = run_cli(capsys, "bench", "--output", str(out))
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["shape", "iterations", "cycles", "flop_per_cycle", "gflops"]
    by_shape = {r["shape"]: r for r in rows}
    assert len(rows) == 256 + 1 + 4
    assert float(by_shape["128x2048x1"]["flop_per_cycle"]) == pytest.approx(59.4, abs=0.05)
    assert by_shape["128x2048x1"]["flop_per_cycle"] == by_shape["128x8x256"]["flop_per_cycle"]
    assert float(by_shape["mfmacc.h:128x4096x128"]["gflops"]) == pytest.approx(14.85, abs=0.01)
    assert int(by_shape["mfadd.h.mm:128x4096"]["cycles"]) == 16612


def test_bench_single_row_sweep(capsys):
    code, out, _ = run_cli(capsys, "bench", "--sweep", "1", "--no-instructions", "--freq-mhz", "300")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["shape"] for r in rows] == ["128x8x1", "128x8x256"]
    assert int(rows[0]["cycles"]) == 124
    assert run_cli(capsys, "bench", "--sweep", "0")[0] == cli.EXIT_DEVICE


def test_instruction_table_rows():
    rows = {r["instruction"]: r for r in cli.instruction_table()}
    assert rows["mfmacc.h"]["cycles"] == 2_259_456
    assert rows["mfsub.h.mm"]["cycles"] == 17_508
    assert rows["mfmul.h.mm"]["iterations"] == 512


def test_trace_replays_to_same_state(capsys, gemm_dir):
    d, _, _ = gemm_dir
    code, _, _ = run_cli(capsys, "trace", str(d / "gemm.ame"), "--trace-out", str(d / "t.txt"),
                         "--snapshot-out", str(d / "s.bin"))
    assert code == 0
    trace = CommandTrace.loads((d / "t.txt").read_text())
    twin = PseudoChannel(DeviceConfig())
    twin.replay(trace)
    assert twin.snapshot() == (d / "s.bin").read_bytes()


def test_trace_to_stdout(capsys, gemm_dir):
    d, _, _ = gemm_dir
    code, out, _ = run_cli(capsys, "trace", str(d / "gemm.ame"))
    assert code == 0 and out.splitlines()[0].startswith("MODE")


def test_asm_round_trip(capsys, tmp_path):
    for kind in ("add", "mul", "sub", "mac"):
        img = tmp_path / f"{kind}.crf"
        assert run_cli(capsys, "asm", "--pep", kind, "--iterations", "5", "-o", str(img))[0] == 0
        assert len(img.read_bytes()) == 4 * isa.CRF_ENTRIES
        code, text, _ = run_cli(capsys, "asm", "-d", str(img))
        assert code == 0
        src = tmp_path / f"{kind}.s"
        src.write_text(text)
        code, text2, _ = run_cli(capsys, "asm", str(src))
        assert code == 0 and text2 == text
        assert isa.assemble(text).to_image() == img.read_bytes()
    assert isa.PepProgram.from_image((tmp_path / "mac.crf").read_bytes()).words()[0] != 0
    bad = tmp_path / "bad.s"
    bad.write_text("FROB GRF_A[0]\n")
    assert run_cli(capsys, "asm", str(bad))[0] == cli.EXIT_PARSE


def test_asm_needs_input():
    with pytest.raises(SystemExit):
        cli.main(["asm"])


def test_local_broadcast_run(capsys, gemm_dir):
    d, A, B = gemm_dir
    code, _, _ = run_cli(capsys, "run", str(d / "gemm.ame"), "--broadcast-source", "local")
    assert code == 0
    assert np.array_equal(L.read_matrix(d / "c.mat"), oracle.oracle_gemm(A, B))


def test_pep_kinds_listed():
    assert set(cli._PEP_BUILDERS.values()) == set(PepKind)
