from sqlalchemy import Column, DateTime, Integer, String, Text
from sqlalchemy.sql import func

from moekit.db.session import Base


class RunRecord(Base):
    """
    One executed subcommand with its configuration and report
    """
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    subcommand = Column(String, nullable=False, index=True)
    config = Column(Text, nullable=False)  # JSON
    exit_code = Column(Integer, nullable=False)
    report = Column(Text, nullable=False)  # JSON

    created_at = Column(DateTime(timezone=True), server_default=func.now())
