import logging
import platform
from typing import Optional

from moekit.alloc.hetero import allocate, probe_capacity
from moekit.schemas.config import LatencyConfig
from moekit.schemas.reports import AllocationPlan, ProbeResult

logger = logging.getLogger(__name__)


def run_allocate(config: LatencyConfig) -> AllocationPlan:
    profiles = config.profiles()
    for profile in profiles:
        logger.debug("device %d (%s): %.4g s", profile.id, profile.label or "-", profile.proxy_latency)
    return allocate(config.kind, [p.proxy_latency for p in profiles], config.total)


def run_probe(
    n_iterations: int, matrix_size: int, seed: int = 0, device: Optional[str] = None
) -> ProbeResult:
    elapsed = probe_capacity(n_iterations, matrix_size, seed)
    logger.info("probe: %d x %d^2 products in %.4f s", n_iterations, matrix_size, elapsed)
    return ProbeResult(
        device=device or platform.node() or "local",
        elapsed_s=elapsed,
        n_iterations=n_iterations,
        matrix_size=matrix_size,
    )
