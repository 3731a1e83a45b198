import logging

from pydantic import BaseModel
from sqlalchemy.orm import Session

from moekit.models.run import RunRecord

logger = logging.getLogger(__name__)


def record_run(
    db: Session, subcommand: str, config: BaseModel, exit_code: int, report: BaseModel
) -> RunRecord:
    record = RunRecord(
        subcommand=subcommand,
        config=config.json(),
        exit_code=exit_code,
        report=report.json(),
    )
    db.add(record)
    db.commit()
    db.refresh(record)
    logger.debug("recorded %s run %d", subcommand, record.id)
    return record
