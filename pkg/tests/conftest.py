import os
import tempfile

# Settings are read once at import time, so point the run history at a
# scratch file before anything from moekit is imported.
_DB_DIR = tempfile.mkdtemp(prefix="moekit-tests-")
os.environ["SQLALCHEMY_DATABASE_URI"] = f"sqlite:///{_DB_DIR}/runs.db"
os.environ.setdefault("RECORD_RUNS", "false")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from fastapi.testclient import TestClient  # noqa: E402
from sqlalchemy import create_engine  # noqa: E402
from sqlalchemy.orm import sessionmaker  # noqa: E402

from moekit.core.deps import get_db  # noqa: E402
from moekit.db.session import Base, engine_options  # noqa: E402
from moekit.kernels.moe_layer import init_params  # noqa: E402
from moekit.kernels.routing import synthesize_routing  # noqa: E402
from moekit.main import app  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def small_layer():
    """
    N=8, E=4, k=2, Di=3, H=5, Do=2 with seeded values and upstream gradient.
    """
    rng = np.random.default_rng(7)
    params = init_params(4, 3, 5, 2, seed=11)
    routing = synthesize_routing(8, 4, 2, "uniform", seed=3)
    x = rng.standard_normal((8, 3))
    g_y = rng.standard_normal((8, 2))
    return x, params, routing, g_y


@pytest.fixture
def db_session(tmp_path):
    url = f"sqlite:///{tmp_path / 'api.db'}"
    engine = create_engine(url, **engine_options(url))
    Base.metadata.create_all(bind=engine)
    TestingSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    db = TestingSessionLocal()
    try:
        yield db
    finally:
        db.close()
        engine.dispose()


@pytest.fixture
def client(db_session):
    def override_get_db():
        yield db_session

    app.dependency_overrides[get_db] = override_get_db
    try:
        yield TestClient(app)
    finally:
        app.dependency_overrides.clear()
