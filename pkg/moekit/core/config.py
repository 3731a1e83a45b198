from typing import List, Union

from pydantic import AnyHttpUrl, BaseSettings, validator


class Settings(BaseSettings):
    PROJECT_NAME: str = "moekit"
    API_V1_STR: str = "/api"

    # CORS
    BACKEND_CORS_ORIGINS: List[AnyHttpUrl] = []

    @validator("BACKEND_CORS_ORIGINS", pre=True)
    def assemble_cors_origins(cls, v: Union[str, List[str]]) -> Union[List[str], str]:
        if isinstance(v, str) and not v.startswith("["):
            return [i.strip() for i in v.split(",") if i.strip()]
        elif isinstance(v, (list, str)):
            return v
        raise ValueError(v)

    # Run history
    SQLALCHEMY_DATABASE_URI: str = "sqlite:///./moekit_runs.db"
    RECORD_RUNS: bool = False

    LOG_LEVEL: str = "INFO"

    # Instance defaults shared by every subcommand
    DEFAULT_TOKENS: int = 64
    DEFAULT_EXPERTS: int = 8
    DEFAULT_TOPK: int = 2
    DEFAULT_DIN: int = 16
    DEFAULT_HIDDEN: int = 64
    DEFAULT_DOUT: int = 16
    DEFAULT_BLK: int = 8
    DEFAULT_COL_TILE: int = 32
    DEFAULT_SEED: int = 0
    DEFAULT_ACTIVATION: str = "gelu"
    DEFAULT_CAPACITY_FACTOR: float = 1.25

    # Verification
    VERIFY_INSTANCES: int = 50
    ORACLE_TOLERANCE: float = 1e-12
    LAYER_TOLERANCE: float = 1e-10
    GRAD_TOLERANCE: float = 1e-6

    class Config:
        case_sensitive = True
        env_file = ".env"


settings = Settings()
