"""
Heterogeneity-aware division of the batch or hidden dimension.

Each device is probed with the same proxy workload; a device's share is
proportional to the inverse of its proxy latency, rounded to integers without
changing the total.
"""
import logging
import math
import time
from typing import List, Optional, Sequence

import numpy as np

from moekit.core.errors import AllocationError
from moekit.schemas.config import AllocationKind
from moekit.schemas.reports import AllocationPlan

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-9


def probe_capacity(n_iterations: int = 20, matrix_size: int = 256, seed: int = 0) -> float:
    """
    Wall time of ``n_iterations`` dense ``matrix_size`` square products.

    The operands depend only on ``seed``; the timing is whatever the machine
    gives, so the result is only meaningful without concurrent load.
    """
    if n_iterations < 0 or matrix_size < 1:
        raise AllocationError("need n_iterations >= 0 and matrix_size >= 1")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((matrix_size, matrix_size))
    b = rng.standard_normal((matrix_size, matrix_size))
    start = time.perf_counter()
    for _ in range(n_iterations):
        a @ b
    return time.perf_counter() - start


def capacity_proportions(latencies: Sequence[float]) -> List[float]:
    t = np.asarray(latencies, dtype=np.float64)
    if t.size == 0:
        raise AllocationError("at least one latency is required")
    if not np.isfinite(t).all() or (t <= 0).any():
        raise AllocationError(f"latencies must be positive and finite, got {list(latencies)}")
    inverse = 1.0 / t
    return (inverse / inverse.sum()).tolist()


def round_preserving_sum(ideal: Sequence[float], total: Optional[int] = None) -> List[int]:
    """
    Largest-remainder rounding: floor every value, then hand the missing
    units to the largest fractional parts, lower index first on ties.
    """
    values = [float(v) for v in ideal]
    if any(v < 0 or not math.isfinite(v) for v in values):
        raise AllocationError(f"ideal shares must be finite and non-negative, got {values}")
    if total is None:
        total = int(round(sum(values)))
    if abs(sum(values) - total) > SUM_TOLERANCE * max(1.0, total):
        raise AllocationError(f"ideal shares sum to {sum(values)}, expected {total}")

    shares = [int(math.floor(v)) for v in values]
    remaining = total - sum(shares)
    by_fraction = sorted(range(len(values)), key=lambda i: (-(values[i] - shares[i]), i))
    for i in by_fraction[:remaining]:
        shares[i] += 1
    return shares


def _allocate(kind: AllocationKind, latencies: Sequence[float], total: int) -> AllocationPlan:
    if total < 0:
        raise AllocationError(f"total must be non-negative, got {total}")
    proportions = capacity_proportions(latencies)
    ideal = [r * total for r in proportions]
    plan = AllocationPlan(
        kind=kind,
        total=total,
        shares=round_preserving_sum(ideal, total),
        ideal=ideal,
        proportions=proportions,
    )
    logger.info("%s allocation of %d: %s", kind.value, total, plan.shares)
    return plan


def allocate_batches(latencies: Sequence[float], global_batch: int) -> AllocationPlan:
    return _allocate(AllocationKind.BATCH, latencies, global_batch)


def allocate_hidden(latencies: Sequence[float], hidden: int) -> AllocationPlan:
    return _allocate(AllocationKind.HIDDEN, latencies, hidden)


def allocate(kind: AllocationKind, latencies: Sequence[float], total: int) -> AllocationPlan:
    return _allocate(AllocationKind(kind), latencies, total)
