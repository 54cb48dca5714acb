"""Table-driven cycle model for PEP runs and AME instructions.

Per-iteration costs are kept as exact fractions (measured totals at 256
iterations divided by 256).  ``cycles_for_pep`` reports whole cycles, rounded
half-up; report totals sum the exact values and round once at the end.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Tuple

from .isa import PepKind

DEFAULT_FREQ_MHZ = 250.0
FREQ_RANGE_MHZ = (250.0, 300.0)
PEAK_FLOP_PER_CYCLE = 128
CALIBRATION_ITERATIONS = 256
FLOPS_PER_MAC_ITER = 2 * 128 * 8

_KEYS = {"mac": PepKind.MAC_PEP, "add": PepKind.ADD_PEP, "mul": PepKind.MUL_PEP, "sub": PepKind.SUB_PEP}


@dataclass(frozen=True)
class PepCost:
    setup: Fraction
    per_iter: Fraction

    def __post_init__(self):
        if self.setup <= 0 or self.per_iter <= 0:
            raise ValueError("cost table entries must be positive")


@dataclass
class PepCostTable:
    costs: Dict[PepKind, PepCost] = field(default_factory=lambda: {
        PepKind.MAC_PEP: PepCost(Fraction(90), Fraction(8736, 256)),
        PepKind.ADD_PEP: PepCost(Fraction(82), Fraction(8224, 256)),
        PepKind.MUL_PEP: PepCost(Fraction(84), Fraction(10240, 256)),
        PepKind.SUB_PEP: PepCost(Fraction(82), Fraction(8672, 256)),
    })
    relocation_cycles_per_command: Fraction = Fraction(1)

    def __getitem__(self, kind: PepKind) -> PepCost:
        if kind not in self.costs:
            raise KeyError(f"no cost entry for {kind}")
        return self.costs[kind]

    @classmethod
    def from_text(cls, text: str) -> "PepCostTable":
        """Override defaults from ``key=value`` lines.

        Keys: ``<kind>.setup``, ``<kind>.per_iter`` or ``<kind>.exec256``
        (total at 256 iterations) for kind in mac/add/mul/sub, and
        ``relocation.per_command``.  Values may be fractions (``8736/256``).
        """
        table = cls()
        costs = dict(table.costs)
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"cost table line {n}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            value = Fraction(val)
            if key == "relocation.per_command":
                table.relocation_cycles_per_command = value
                continue
            name, _, attr = key.partition(".")
            if name not in _KEYS or attr not in ("setup", "per_iter", "exec256"):
                raise ValueError(f"cost table line {n}: unknown key {key!r}")
            kind = _KEYS[name]
            cur = costs[kind]
            if attr == "setup":
                costs[kind] = PepCost(value, cur.per_iter)
            elif attr == "per_iter":
                costs[kind] = PepCost(cur.setup, value)
            else:
                costs[kind] = PepCost(cur.setup, value / CALIBRATION_ITERATIONS)
        table.costs = costs
        return table

    @classmethod
    def load(cls, path) -> "PepCostTable":
        with open(path) as f:
            return cls.from_text(f.read())


DEFAULT_COSTS = PepCostTable()


def _round(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def exact_cycles(kind: PepKind, iterations: int, table: PepCostTable = DEFAULT_COSTS) -> Tuple[Fraction, Fraction]:
    if not 1 <= iterations <= CALIBRATION_ITERATIONS:
        raise ValueError(f"iterations must be 1..256, got {iterations}")
    c = table[kind]
    return c.setup, c.per_iter * iterations


def cycles_for_pep(kind: PepKind, iterations: int, table: PepCostTable = DEFAULT_COSTS) -> Tuple[int, int]:
    setup, exec_ = exact_cycles(kind, iterations, table)
    return _round(setup), _round(exec_)


def check_freq(freq_mhz: float) -> float:
    lo, hi = FREQ_RANGE_MHZ
    if not lo <= freq_mhz <= hi:
        raise ValueError(f"frequency must be within {lo:g}-{hi:g} MHz, got {freq_mhz:g}")
    return freq_mhz


@dataclass
class CycleReport:
    setup_cycles: int = 0
    exec_cycles: int = 0
    relocation_cycles: int = 0
    total_cycles: int = 0
    data_commands: int = 0
    relocation_commands: int = 0
    staging_commands: int = 0
    pep_runs: int = 0
    flops: int = 0
    exact_total: Fraction = Fraction(0)

    @property
    def flop_per_cycle(self) -> float:
        return self.flops / self.total_cycles if self.total_cycles else 0.0

    def gflops_at(self, freq_mhz: float = DEFAULT_FREQ_MHZ) -> float:
        return self.flop_per_cycle * check_freq(freq_mhz) / 1000.0

    @property
    def setup_fraction(self) -> float:
        return self.setup_cycles / self.total_cycles if self.total_cycles else 0.0

    def to_dict(self, freq_mhz: float = DEFAULT_FREQ_MHZ) -> dict:
        d = asdict(self)
        d["exact_total"] = str(self.exact_total)
        d["flop_per_cycle"] = round(self.flop_per_cycle, 6)
        d["gflops"] = round(self.gflops_at(freq_mhz), 6)
        d["freq_mhz"] = freq_mhz
        return d

    def to_json(self, freq_mhz: float = DEFAULT_FREQ_MHZ) -> str:
        return json.dumps(self.to_dict(freq_mhz), indent=2, sort_keys=True)

    def to_csv(self, freq_mhz: float = DEFAULT_FREQ_MHZ) -> str:
        d = self.to_dict(freq_mhz)
        keys = sorted(d)
        return ",".join(keys) + "\n" + ",".join(str(d[k]) for k in keys) + "\n"


@dataclass(frozen=True)
class RunCost:
    """Perf-relevant summary of one PEP run inside a plan."""

    kind: PepKind
    iterations: int
    data_commands: int


def report(runs: Iterable[RunCost], flops: int = 0, relocation_commands: int = 0, staging_commands: int = 0,
           table: PepCostTable = DEFAULT_COSTS) -> CycleReport:
    setup = Fraction(0)
    exec_ = Fraction(0)
    r = CycleReport(flops=flops, relocation_commands=relocation_commands, staging_commands=staging_commands)
    for run in runs:
        s, e = exact_cycles(run.kind, run.iterations, table)
        setup += s
        exec_ += e
        r.data_commands += run.data_commands
        r.pep_runs += 1
    reloc = table.relocation_cycles_per_command * relocation_commands
    r.exact_total = setup + exec_ + reloc
    r.setup_cycles = _round(setup)
    r.relocation_cycles = _round(reloc)
    r.total_cycles = _round(r.exact_total)
    r.exec_cycles = r.total_cycles - r.setup_cycles - r.relocation_cycles
    return r


def report_for_plan(plan, table: PepCostTable = DEFAULT_COSTS) -> CycleReport:
    """CycleReport of an ``ExecutionPlan`` (or anything with ``pep_runs``/``flops``)."""
    runs = [RunCost(r.kind, r.iterations, r.schedule.data_commands) for r in plan.pep_runs()]
    return report(runs, plan.flops, plan.relocation_commands(), plan.staging_commands(), table)


def merge(reports: Iterable[CycleReport]) -> CycleReport:
    out = CycleReport()
    for r in reports:
        for f in ("setup_cycles", "exec_cycles", "relocation_cycles", "total_cycles", "data_commands",
                  "relocation_commands", "staging_commands", "pep_runs", "flops"):
            setattr(out, f, getattr(out, f) + getattr(r, f))
        out.exact_total += r.exact_total
    return out


# --- scaling curve ----------------------------------------------------------------

def mac_efficiency(iterations: int, table: PepCostTable = DEFAULT_COSTS) -> Fraction:
    """FLOP/cycle of one MAC-PEP run, from exact (unrounded) cycles."""
    setup, exec_ = exact_cycles(PepKind.MAC_PEP, iterations, table)
    return Fraction(FLOPS_PER_MAC_ITER * iterations) / (setup + exec_)


@dataclass(frozen=True)
class ScalingRow:
    shape: str
    iterations: int
    cycles: int
    exact_cycles: Fraction
    flop_per_cycle: float
    gflops: float


def scaling_curve(shapes: Iterable[Tuple[int, int, int]], freq_mhz: float = DEFAULT_FREQ_MHZ,
                  table: PepCostTable = DEFAULT_COSTS) -> List[ScalingRow]:
    """Efficiency of a single MAC-PEP run for each (M, K, N) with ceil(K/8)*N <= 256."""
    rows = []
    for m, k, n in shapes:
        it = -(-k // 8) * n
        setup, exec_ = exact_cycles(PepKind.MAC_PEP, it, table)
        exact = setup + exec_
        eff = Fraction(2 * m * k * n) / exact
        rows.append(ScalingRow(f"{m}x{k}x{n}", it, _round(exact), exact, float(eff),
                               float(eff) * check_freq(freq_mhz) / 1000.0))
    return rows
