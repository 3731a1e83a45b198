import json
from datetime import datetime
from typing import Any, Dict, Optional

from pydantic import BaseModel, validator


# Shared properties for a recorded run
class RunBase(BaseModel):
    subcommand: str
    exit_code: int


# Properties to return via API
class Run(RunBase):
    id: int
    created_at: Optional[datetime] = None

    class Config:
        orm_mode = True


# Full run representation with config and report documents
class RunFull(Run):
    config: Dict[str, Any]
    report: Dict[str, Any]

    @validator("config", "report", pre=True)
    def parse_json(cls, v):
        if isinstance(v, str):
            return json.loads(v)
        return v

    class Config:
        orm_mode = True
