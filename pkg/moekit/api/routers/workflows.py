from typing import Any

from fastapi import APIRouter, Depends, HTTPException
from pydantic import BaseModel
from sqlalchemy.orm import Session

from moekit.core.deps import get_db
from moekit.schemas.config import GradcheckConfig, LatencyConfig, RunConfig, ScenarioConfig
from moekit.schemas.reports import (
    AllocationPlan,
    BenchReport,
    GradcheckReport,
    SimulateReport,
    VerifyReport,
)
from moekit.services import exit_code
from moekit.services.allocate import run_allocate
from moekit.services.bench import run_bench
from moekit.services.gradcheck import run_gradcheck
from moekit.services.records import record_run
from moekit.services.simulate import run_simulate
from moekit.services.verify import run_verify

router = APIRouter()

FILE_FIELDS = ("routing_path", "input_path", "output_path")


def _reject_paths(config: BaseModel) -> None:
    named = [f for f in FILE_FIELDS if getattr(config, f, None) is not None]
    if named:
        raise HTTPException(
            status_code=422,
            detail=f"{', '.join(named)} can only be given on the command line",
        )


@router.post("/verify", response_model=VerifyReport)
def verify(config: RunConfig, db: Session = Depends(get_db)) -> Any:
    """
    Run the equivalence suites.
    """
    _reject_paths(config)
    report = run_verify(config)
    record_run(db, "verify", config, exit_code(report), report)
    return report


@router.post("/gradcheck", response_model=GradcheckReport)
def gradcheck(config: GradcheckConfig, db: Session = Depends(get_db)) -> Any:
    """
    Compare analytic gradients with central finite differences.
    """
    _reject_paths(config)
    report = run_gradcheck(config)
    record_run(db, "gradcheck", config, exit_code(report), report)
    return report


@router.post("/bench", response_model=BenchReport)
def bench(config: RunConfig, db: Session = Depends(get_db)) -> Any:
    """
    Count redundancy and activation memory for k = 1..topk.
    """
    _reject_paths(config)
    report = run_bench(config)
    record_run(db, "bench", config, exit_code(report), report)
    return report


@router.post("/simulate", response_model=SimulateReport)
def simulate(scenario: ScenarioConfig, db: Session = Depends(get_db)) -> Any:
    """
    Run a multi-device scenario.
    """
    _reject_paths(scenario)
    report = run_simulate(scenario)
    record_run(db, "simulate", scenario, exit_code(report), report)
    return report


@router.post("/allocate", response_model=AllocationPlan)
def allocate(config: LatencyConfig, db: Session = Depends(get_db)) -> Any:
    """
    Divide the batch or hidden dimension by measured latencies.
    """
    plan = run_allocate(config)
    record_run(db, "allocate", config, exit_code(plan), plan)
    return plan
