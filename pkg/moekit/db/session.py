from typing import Any, Dict

from sqlalchemy import create_engine
from sqlalchemy.engine import make_url
from sqlalchemy.orm import declarative_base, sessionmaker

from moekit.core.config import settings


def engine_options(uri: str) -> Dict[str, Any]:
    """
    Keyword arguments for ``create_engine`` that depend on the backend.
    """
    if make_url(uri).get_backend_name() == "sqlite":
        # API handlers run in a threadpool, CLI runs in the main thread
        return {"connect_args": {"check_same_thread": False}}
    return {"pool_pre_ping": True}


# Create SQLAlchemy engine
engine = create_engine(
    settings.SQLALCHEMY_DATABASE_URI, **engine_options(settings.SQLALCHEMY_DATABASE_URI)
)

# Create SessionLocal class
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

# Create Base class
Base = declarative_base()


def init_db() -> None:
    """
    Create the run-history tables if they are missing.
    """
    from moekit.db import base  # noqa: F401

    Base.metadata.create_all(bind=engine)
