from typing import Any, List, Optional

from fastapi import APIRouter, Depends, HTTPException
from sqlalchemy.orm import Session

from moekit.core.deps import get_db
from moekit.models.run import RunRecord
from moekit.schemas.run import Run, RunFull

router = APIRouter()


@router.get("/", response_model=List[Run])
def get_runs(
    db: Session = Depends(get_db),
    skip: int = 0,
    limit: int = 100,
    subcommand: Optional[str] = None,
) -> Any:
    """
    Retrieve recorded runs, newest first.
    """
    query = db.query(RunRecord)
    if subcommand:
        query = query.filter(RunRecord.subcommand == subcommand)
    return query.order_by(RunRecord.id.desc()).offset(skip).limit(limit).all()


@router.get("/{run_id}", response_model=RunFull)
def get_run(run_id: int, db: Session = Depends(get_db)) -> Any:
    """
    Get a recorded run with its config and report.
    """
    record = db.query(RunRecord).filter(RunRecord.id == run_id).first()
    if not record:
        raise HTTPException(status_code=404, detail="Run not found")
    return record
