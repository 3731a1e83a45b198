from contextlib import contextmanager
from typing import Generator, Iterator

from sqlalchemy.orm import Session

from moekit.db.session import SessionLocal


def get_db() -> Generator[Session, None, None]:
    """
    Get database session
    """
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


@contextmanager
def session_scope() -> Iterator[Session]:
    """
    Database session for code running outside a request
    """
    yield from get_db()
