from typing import ClassVar, Dict, List, Optional, Tuple

from pydantic import BaseModel, root_validator

from moekit.schemas.config import AllocationKind, SimScheme


class CsvReport(BaseModel):
    """
    A report that also renders as CSV rows under a fixed column set.
    """

    CSV_COLUMNS: ClassVar[Tuple[str, ...]] = ()

    def csv_rows(self) -> List[Dict[str, object]]:
        raise NotImplementedError


# Verification
class SuiteResult(BaseModel):
    name: str
    instances: int
    max_deviation: float
    tolerance: float
    passed: bool
    violations: List[str] = []


class VerifyReport(CsvReport):
    seed: int
    instances: int
    suites: List[SuiteResult]
    passed: bool

    CSV_COLUMNS: ClassVar[Tuple[str, ...]] = (
        "suite",
        "instances",
        "max_deviation",
        "tolerance",
        "passed",
    )

    def csv_rows(self) -> List[Dict[str, object]]:
        return [
            {
                "suite": s.name,
                "instances": s.instances,
                "max_deviation": s.max_deviation,
                "tolerance": s.tolerance,
                "passed": s.passed,
            }
            for s in self.suites
        ]


class GradcheckEntry(BaseModel):
    tensor: str
    max_rel_error: float
    worst_index: List[int]
    analytic: float
    numeric: float


class GradcheckReport(CsvReport):
    n_parameters: int
    tolerance: float
    entries: List[GradcheckEntry]
    near_kink: int = 0
    reseeds: int = 0
    passed: bool

    CSV_COLUMNS: ClassVar[Tuple[str, ...]] = (
        "tensor",
        "max_rel_error",
        "worst_index",
        "analytic",
        "numeric",
    )

    def csv_rows(self) -> List[Dict[str, object]]:
        return [
            {
                "tensor": e.tensor,
                "max_rel_error": e.max_rel_error,
                "worst_index": ":".join(str(i) for i in e.worst_index),
                "analytic": e.analytic,
                "numeric": e.numeric,
            }
            for e in self.entries
        ]


# Redundancy and benchmarks
class RedundancyReport(BaseModel):
    n_tokens: int
    n_experts: int
    k: int
    capacity: int
    capacity_factor: float
    token_macs_expert_specific: int
    token_macs_oracle: int
    padded_rows: int
    dropped_tokens: int


class BenchRow(BaseModel):
    k: int
    n_tokens: int
    n_experts: int
    distribution: str
    token_macs_expert_specific: int
    token_macs_oracle: int
    padded_rows: int
    dropped_tokens: int
    memory_naive: float
    memory_efficient: float
    esmm_seconds: float
    ess_seconds: float
    estmm_seconds: float
    esfk_seconds: float


class BenchReport(CsvReport):
    capacity_factor: float
    hidden_ratio: float
    rows: List[BenchRow]

    CSV_COLUMNS: ClassVar[Tuple[str, ...]] = tuple(BenchRow.__fields__)

    def csv_rows(self) -> List[Dict[str, object]]:
        return [row.dict() for row in self.rows]


# Simulation
class CommRecord(BaseModel):
    name: str
    kind: str
    volume: float
    time: float
    overlapped: float = 0.0


class SimReport(BaseModel):
    scheme: SimScheme
    n_devices: int
    compute_time: List[float]
    comm: List[CommRecord]
    comm_time: float
    overlap_savings: float
    makespan: float
    makespan_no_overlap: float
    peak_param_memory: List[int] = []
    baseline_param_memory: List[int] = []
    peak_activation_memory: List[int] = []
    max_output_delta: Optional[float] = None
    max_grad_delta: Optional[float] = None

    @root_validator(skip_on_failure=True)
    def times_sane(cls, values):
        times = values["compute_time"] + [values["comm_time"], values["makespan"]]
        if any(t < 0 for t in times):
            raise ValueError("simulated times must be non-negative")
        return values


class CrossoverRow(BaseModel):
    workload: float
    data_centric: float
    model_centric: float
    preferred: SimScheme


class CrossoverTable(BaseModel):
    rows: List[CrossoverRow]
    crossover_workload: Optional[float] = None
    flip_at: Optional[float] = None


class DivisionPoint(BaseModel):
    proportion: float
    makespan: float


class DivisionSweep(BaseModel):
    scheme: SimScheme
    points: List[DivisionPoint]
    best_proportion: float
    capacity_proportion: float


class SimulateReport(CsvReport):
    tolerance: float
    passed: bool
    runs: List[SimReport]
    division: List[DivisionSweep] = []
    crossover: Optional[CrossoverTable] = None
    uniform_makespan: Dict[str, float] = {}
    proportional_makespan: Dict[str, float] = {}

    CSV_COLUMNS: ClassVar[Tuple[str, ...]] = (
        "scheme",
        "n_devices",
        "makespan",
        "makespan_no_overlap",
        "comm_time",
        "overlap_savings",
        "max_output_delta",
        "max_grad_delta",
    )

    def csv_rows(self) -> List[Dict[str, object]]:
        return [
            {name: getattr(run, name) for name in self.CSV_COLUMNS} for run in self.runs
        ]


# Heterogeneous allocation
class ProbeResult(CsvReport):
    device: str
    elapsed_s: float
    n_iterations: int
    matrix_size: int

    CSV_COLUMNS: ClassVar[Tuple[str, ...]] = ("device", "elapsed_s", "n_iterations", "matrix_size")

    def csv_rows(self) -> List[Dict[str, object]]:
        return [self.dict()]


class AllocationPlan(CsvReport):
    kind: AllocationKind
    total: int
    shares: List[int]
    ideal: List[float]
    proportions: List[float]

    CSV_COLUMNS: ClassVar[Tuple[str, ...]] = ("device", "proportion", "ideal", "share")

    @root_validator(skip_on_failure=True)
    def shares_sum_to_total(cls, values):
        if sum(values["shares"]) != values["total"]:
            raise ValueError(f"shares {values['shares']} do not sum to {values['total']}")
        if len(values["ideal"]) != len(values["shares"]):
            raise ValueError("one ideal value per share is required")
        return values

    def csv_rows(self) -> List[Dict[str, object]]:
        return [
            {"device": i, "proportion": p, "ideal": q, "share": s}
            for i, (p, q, s) in enumerate(zip(self.proportions, self.ideal, self.shares))
        ]
