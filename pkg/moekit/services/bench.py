"""
Redundancy counts, activation-memory units and operator wall times for
``k = 1..topk``, or for the single k of a routing file.
"""
import logging
import time
from typing import Callable

import numpy as np

from moekit.kernels.es_ops import TileRunner, esfk, esmm, ess, estmm
from moekit.kernels.moe_layer import MemoryScheme, estimate_activation_memory, init_params
from moekit.kernels.oracle import count_redundancy
from moekit.kernels.routing import build_reindex, synthesize_routing
from moekit.kernels.tensor import random_matrix
from moekit.schemas.config import RunConfig
from moekit.schemas.reports import BenchReport, BenchRow
from moekit.services.instances import load_input, load_routing

logger = logging.getLogger(__name__)


def _seconds(fn: Callable[[], object]) -> float:
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def run_bench(config: RunConfig) -> BenchReport:
    rng = np.random.default_rng(config.seed)
    params = init_params(config.n_experts, config.d_in, config.hidden, config.d_out, seed=config.seed)
    x = random_matrix(config.n_tokens, config.d_in, rng)
    if config.input_path is not None:
        x = load_input(config)
    g = random_matrix(config.n_tokens, config.hidden, rng)
    w1_t = params.w1_t()
    runner = TileRunner(workers=config.workers)
    hidden_ratio = config.hidden / config.d_in
    tile = config.col_tile

    if config.routing_path is not None:
        routings = [load_routing(config)]
    else:
        routings = [
            synthesize_routing(
                config.n_tokens, config.n_experts, k, config.distribution, config.seed, config.zipf_s
            )
            for k in range(1, config.topk + 1)
        ]

    rows = []
    for routing in routings:
        k = routing.k
        redundancy = count_redundancy(
            routing, config.d_in, config.hidden, config.d_out, config.capacity_factor
        )
        rx = build_reindex(routing.choice(0), config.n_experts, config.blk)
        row = BenchRow(
            k=k,
            n_tokens=config.n_tokens,
            n_experts=config.n_experts,
            distribution="file" if config.routing_path else config.distribution.value,
            token_macs_expert_specific=redundancy.token_macs_expert_specific,
            token_macs_oracle=redundancy.token_macs_oracle,
            padded_rows=redundancy.padded_rows,
            dropped_tokens=redundancy.dropped_tokens,
            memory_naive=estimate_activation_memory(config.n_tokens, k, hidden_ratio, MemoryScheme.NAIVE),
            memory_efficient=estimate_activation_memory(
                config.n_tokens, k, hidden_ratio, MemoryScheme.MEMORY_EFFICIENT
            ),
            esmm_seconds=_seconds(
                lambda: esmm(x, params.w1, params.b1, rx, col_tile=tile, runner=runner)
            ),
            ess_seconds=_seconds(lambda: ess(g, rx, col_tile=tile, runner=runner)),
            estmm_seconds=_seconds(lambda: estmm(x, g, rx, col_tile=tile, runner=runner)),
            esfk_seconds=_seconds(lambda: esfk(x, g, w1_t, rx, col_tile=tile, runner=runner)),
        )
        logger.info(
            "k=%d: expert-specific %d MACs, oracle %d MACs, %d padded, %d dropped",
            k, row.token_macs_expert_specific, row.token_macs_oracle,
            row.padded_rows, row.dropped_tokens,
        )
        rows.append(row)
    return BenchReport(
        capacity_factor=config.capacity_factor, hidden_ratio=hidden_ratio, rows=rows
    )
