"""
Seeded equivalence suites behind the ``verify`` subcommand.
"""
import logging
from typing import Callable, List, Optional

import numpy as np

from moekit.core.config import settings
from moekit.core.errors import ConfigError
from moekit.kernels.es_ops import DETERMINISTIC, TileRunner, esfk, esmm, ess, estmm
from moekit.kernels.moe_layer import (
    MemoryScheme,
    estimate_activation_memory,
    moe_backward,
    moe_forward,
)
from moekit.kernels.oracle import (
    esmm_reference,
    ess_reference,
    estmm_reference,
    oracle_backward,
    oracle_forward,
)
from moekit.kernels.routing import build_reindex, check_reindex
from moekit.kernels.tensor import max_scaled_error
from moekit.schemas.config import RunConfig
from moekit.schemas.reports import SuiteResult, VerifyReport
from moekit.services.instances import LayerInstance, random_instance

logger = logging.getLogger(__name__)

FAULT = 1e-3

SuiteCheck = Callable[[LayerInstance, RunConfig, TileRunner, List[str]], float]


def _operator_oracle(inst: LayerInstance, config: RunConfig, runner: TileRunner, problems):
    p = inst.params
    worst = 0.0
    for i in range(inst.routing.k):
        a = inst.routing.choice(i)
        rx = build_reindex(a, p.n_experts, inst.blk)
        e = p.n_experts
        y = esmm(inst.x, p.w1, p.b1, rx, col_tile=config.col_tile, runner=runner)
        if config.inject_fault:
            y[0, 0] += FAULT
        h = np.tanh(y)
        checks = (
            (y, esmm_reference(inst.x, p.w1, p.b1, a)),
            (ess(h, rx, col_tile=config.col_tile, runner=runner), ess_reference(h, a, e)),
            (
                estmm(inst.x, h, rx, col_tile=config.col_tile, runner=runner),
                estmm_reference(inst.x, h, a, e),
            ),
        )
        gx, gb, gw = esfk(inst.x, h, p.w1_t(), rx, col_tile=config.col_tile, runner=runner)
        checks += (
            (gx, esmm_reference(h, p.w1_t(), None, a)),
            (gb, ess_reference(h, a, e)),
            (gw, estmm_reference(inst.x, h, a, e)),
        )
        worst = max([worst] + [max_scaled_error(got, want) for got, want in checks])
    return worst


def _scheme_equivalence(inst: LayerInstance, config: RunConfig, runner: TileRunner, problems):
    kwargs = dict(
        blk=inst.blk, activation=config.activation, col_tile=config.col_tile, runner=runner
    )
    naive, _ = moe_forward(inst.x, inst.params, inst.routing, scheme=MemoryScheme.NAIVE, **kwargs)
    eff, _ = moe_forward(inst.x, inst.params, inst.routing, scheme=MemoryScheme.MEMORY_EFFICIENT, **kwargs)
    n, k = inst.routing.n_tokens, inst.routing.k
    gap = estimate_activation_memory(n, k, scheme=MemoryScheme.NAIVE) - estimate_activation_memory(
        n, k, scheme=MemoryScheme.MEMORY_EFFICIENT
    )
    if gap != k * n:
        problems.append(f"memory model gap {gap} != k*N = {k * n}")
    return max_scaled_error(naive, eff)


def _fused_equivalence(inst: LayerInstance, config: RunConfig, runner: TileRunner, problems):
    _, stash = moe_forward(
        inst.x, inst.params, inst.routing, blk=inst.blk,
        activation=config.activation, col_tile=config.col_tile,
    )
    fused = moe_backward(stash, inst.params, inst.g_y, use_fused=True, runner=DETERMINISTIC)
    plain = moe_backward(stash, inst.params, inst.g_y, use_fused=False, runner=DETERMINISTIC)
    return fused.max_abs_diff(plain)


def _reindex_properties(inst: LayerInstance, config: RunConfig, runner: TileRunner, problems):
    count = 0
    for i in range(inst.routing.k):
        a = inst.routing.choice(i)
        found = check_reindex(build_reindex(a, inst.routing.n_experts, inst.blk), a)
        problems.extend(found)
        count += len(found)
    return float(count)


def _layer_oracle(inst: LayerInstance, config: RunConfig, runner: TileRunner, problems):
    y, stash = moe_forward(
        inst.x, inst.params, inst.routing, blk=inst.blk, scheme=config.scheme,
        activation=config.activation, col_tile=config.col_tile, runner=runner,
    )
    grads = moe_backward(stash, inst.params, inst.g_y, runner=runner)
    y_ref, ref_stash = oracle_forward(inst.x, inst.params, inst.routing, activation=config.activation)
    ref = oracle_backward(ref_stash, inst.params, inst.g_y)
    worst = max_scaled_error(y, y_ref)
    for name, got in grads.as_dict().items():
        worst = max(worst, max_scaled_error(got, getattr(ref, name)))
    return worst


SUITES = (
    ("operator-oracle", _operator_oracle, "ORACLE_TOLERANCE"),
    ("scheme-equivalence", _scheme_equivalence, "ORACLE_TOLERANCE"),
    ("fused-equivalence", _fused_equivalence, None),
    ("reindex-properties", _reindex_properties, None),
    ("layer-oracle", _layer_oracle, "LAYER_TOLERANCE"),
)


def run_suite(
    index: int, name: str, check: SuiteCheck, tolerance: float, config: RunConfig, runner
) -> SuiteResult:
    rng = np.random.default_rng([config.seed, index])
    # a tile size set explicitly replaces the drawn one
    blk = config.blk if "blk" in config.__fields_set__ else None
    worst = 0.0
    problems: List[str] = []
    for _ in range(config.instances):
        inst = random_instance(rng, config, blk)
        worst = max(worst, check(inst, config, runner, problems))
    passed = worst <= tolerance and not problems
    logger.info("suite %s: max deviation %.3g (%s)", name, worst, "ok" if passed else "FAILED")
    return SuiteResult(
        name=name,
        instances=config.instances,
        max_deviation=worst,
        tolerance=tolerance,
        passed=passed,
        violations=sorted(set(problems)),
    )


def run_verify(config: RunConfig, suites: Optional[List[str]] = None) -> VerifyReport:
    if config.routing_path is not None or config.input_path is not None:
        raise ConfigError("verify draws its own routings and inputs")
    runner = TileRunner(workers=config.workers)
    results = []
    for index, (name, check, tolerance_key) in enumerate(SUITES):
        if suites is not None and name not in suites:
            continue
        tolerance = 0.0 if tolerance_key is None else getattr(settings, tolerance_key)
        results.append(run_suite(index, name, check, tolerance, config, runner))
    return VerifyReport(
        seed=config.seed,
        instances=config.instances,
        suites=results,
        passed=all(r.passed for r in results),
    )
