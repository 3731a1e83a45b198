import json
from enum import Enum
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, Field, root_validator, validator

from moekit.core.config import settings
from moekit.core.errors import ConfigError
from moekit.kernels.moe_layer import MemoryScheme
from moekit.kernels.routing import RoutingDistribution
from moekit.kernels.tensor import ActivationKind


class OutputFormat(str, Enum):
    JSON = "json"
    CSV = "csv"


class SimScheme(str, Enum):
    DATA_CENTRIC = "data_centric"
    MODEL_CENTRIC = "model_centric"
    BOTH = "both"


class AllocationKind(str, Enum):
    BATCH = "batch"
    HIDDEN = "hidden"


# Shared layer dimensions
class LayerConfig(BaseModel):
    n_tokens: int = Field(settings.DEFAULT_TOKENS, gt=0)
    n_experts: int = Field(settings.DEFAULT_EXPERTS, gt=0)
    topk: int = Field(settings.DEFAULT_TOPK, gt=0)
    d_in: int = Field(settings.DEFAULT_DIN, gt=0)
    hidden: int = Field(settings.DEFAULT_HIDDEN, gt=0)
    d_out: int = Field(settings.DEFAULT_DOUT, gt=0)
    blk: int = Field(settings.DEFAULT_BLK, gt=0)
    seed: int = Field(settings.DEFAULT_SEED, ge=0)
    activation: ActivationKind = ActivationKind(settings.DEFAULT_ACTIVATION)
    routing_path: Optional[str] = None
    input_path: Optional[str] = None

    @root_validator(skip_on_failure=True)
    def topk_within_experts(cls, values):
        if values["topk"] > values["n_experts"]:
            raise ValueError(
                f"topk={values['topk']} exceeds n_experts={values['n_experts']}"
            )
        return values

    @property
    def num_parameters(self) -> int:
        return self.n_experts * (
            self.d_in * self.hidden + self.hidden + self.hidden * self.d_out + self.d_out
        )


# Properties every subcommand receives
class RunConfig(LayerConfig):
    subcommand: str = "verify"
    col_tile: int = Field(settings.DEFAULT_COL_TILE, gt=0)
    scheme: MemoryScheme = MemoryScheme.MEMORY_EFFICIENT
    capacity_factor: float = Field(settings.DEFAULT_CAPACITY_FACTOR, ge=1)
    distribution: RoutingDistribution = RoutingDistribution.UNIFORM
    zipf_s: float = Field(1.0, ge=0)
    instances: int = Field(settings.VERIFY_INSTANCES, gt=0)
    workers: int = Field(1, gt=0)
    inject_fault: bool = False
    zero_upstream: bool = False
    config_path: Optional[str] = None
    out: Optional[str] = None
    format: OutputFormat = OutputFormat.JSON

    @validator("config_path")
    def config_path_exists(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and not Path(v).is_file():
            raise ValueError(f"config file {v} does not exist")
        return v


class GradcheckConfig(RunConfig):
    """
    Finite differences cost two forward passes per parameter, so the
    defaults stay small.
    """

    subcommand: str = "gradcheck"
    n_tokens: int = Field(6, gt=0)
    n_experts: int = Field(3, gt=0)
    topk: int = Field(2, gt=0)
    d_in: int = Field(3, gt=0)
    hidden: int = Field(4, gt=0)
    d_out: int = Field(2, gt=0)
    blk: int = Field(2, gt=0)


class DeviceSpec(BaseModel):
    id: int = Field(..., ge=0)
    compute_rate: float = Field(1.0e9, gt=0)
    link_bandwidth: float = Field(1.0e8, gt=0)
    link_latency: float = Field(1.0e-5, ge=0)


# Scenario documents for the simulator
class ScenarioConfig(LayerConfig):
    devices: List[DeviceSpec] = Field(default_factory=lambda: [DeviceSpec(id=0), DeviceSpec(id=1)])
    scheme: SimScheme = SimScheme.BOTH
    memory_scheme: MemoryScheme = MemoryScheme.MEMORY_EFFICIENT
    distribution: RoutingDistribution = RoutingDistribution.UNIFORM
    batch_split: Optional[List[int]] = None
    hidden_split: Optional[List[int]] = None
    non_moe_time: float = Field(0.0, ge=0)
    n_layers: int = Field(2, gt=0)
    workloads: List[int] = []
    output_path: Optional[str] = None

    @validator("devices")
    def devices_not_empty(cls, v: List[DeviceSpec]) -> List[DeviceSpec]:
        if not v:
            raise ValueError("at least one device is required")
        if sorted(d.id for d in v) != list(range(len(v))):
            raise ValueError("device ids must be 0..n-1")
        return sorted(v, key=lambda d: d.id)

    @validator("workloads")
    def workloads_monotone(cls, v: List[int]) -> List[int]:
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("workloads must be strictly increasing")
        if any(w <= 0 for w in v):
            raise ValueError("workloads must be positive")
        return v

    @root_validator(skip_on_failure=True)
    def splits_match(cls, values):
        n = len(values["devices"])
        for name, total in (("batch_split", values["n_tokens"]), ("hidden_split", values["hidden"])):
            split = values.get(name)
            if split is None:
                continue
            if len(split) != n:
                raise ValueError(f"{name} needs one entry per device")
            if any(s < 0 for s in split) or sum(split) != total:
                raise ValueError(f"{name} must be non-negative and sum to {total}")
        return values


class DeviceProfile(BaseModel):
    id: int = Field(..., ge=0)
    proxy_latency: float = Field(..., gt=0)
    label: Optional[str] = None


class LatencyConfig(BaseModel):
    latencies: List[float]
    total: int = Field(..., ge=0)
    kind: AllocationKind = AllocationKind.BATCH
    labels: Optional[List[str]] = None

    @validator("latencies")
    def latencies_positive(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("at least one latency is required")
        if any(t <= 0 for t in v):
            raise ValueError("latencies must be positive")
        return v

    @validator("labels")
    def labels_match(cls, v: Optional[List[str]], values) -> Optional[List[str]]:
        if v is not None and "latencies" in values and len(v) != len(values["latencies"]):
            raise ValueError("one label per latency is required")
        return v

    def profiles(self) -> List[DeviceProfile]:
        labels = self.labels or [None] * len(self.latencies)
        return [
            DeviceProfile(id=i, proxy_latency=t, label=label)
            for i, (t, label) in enumerate(zip(self.latencies, labels))
        ]


def load_json_config(path: str, model):
    """
    Parse a JSON document into ``model``; any failure is a ``ConfigError``.
    """
    try:
        with open(path) as fh:
            data = json.load(fh)
        return model.parse_obj(data)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(f"cannot load {path}: {exc}") from exc


class ProbeConfig(BaseModel):
    n_iterations: int = Field(20, ge=0)
    matrix_size: int = Field(256, gt=0)
    seed: int = Field(settings.DEFAULT_SEED, ge=0)
    device: Optional[str] = None
