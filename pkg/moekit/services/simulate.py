"""
Scenario runner behind the ``simulate`` subcommand.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np

from moekit.alloc.hetero import capacity_proportions, round_preserving_sum
from moekit.core.config import settings
from moekit.core.errors import ConfigError
from moekit.dist.cost import CostModel, LayerDims, crossover_probe, division_sweep
from moekit.dist.sharding import make_caches, shard_params
from moekit.dist.sim import (
    run_data_centric,
    run_model_centric,
    run_single_device,
    split_rows,
    split_routing,
)
from moekit.kernels.tensor import Matrix2D, max_scaled_error
from moekit.kernels.tensor_io import tensor_write
from moekit.schemas.config import ScenarioConfig, SimScheme
from moekit.schemas.reports import SimReport, SimulateReport
from moekit.services.instances import layer_instance

logger = logging.getLogger(__name__)

SWEEP_STEPS = 19


def even_split(total: int, n: int) -> List[int]:
    return round_preserving_sum([total / n] * n, total)


def _latencies(scenario: ScenarioConfig) -> List[float]:
    return [1.0 / d.compute_rate for d in scenario.devices]


def cost_model(scenario: ScenarioConfig) -> CostModel:
    dims = LayerDims(
        n_experts=scenario.n_experts,
        k=scenario.topk,
        d_in=scenario.d_in,
        hidden=scenario.hidden,
        d_out=scenario.d_out,
    )
    return CostModel(scenario.devices, dims, scenario.non_moe_time, scenario.n_layers)


def _schemes(scenario: ScenarioConfig) -> List[SimScheme]:
    if scenario.scheme is SimScheme.BOTH:
        return [SimScheme.DATA_CENTRIC, SimScheme.MODEL_CENTRIC]
    return [scenario.scheme]


def run_scheme(scenario: ScenarioConfig, scheme: SimScheme) -> Tuple[SimReport, Matrix2D]:
    """
    Run one scheme and record its deviation from a single-device run on the
    concatenated batch. Returns the report and the concatenated output.
    """
    inst = layer_instance(scenario, scenario.distribution)
    n = len(scenario.devices)
    batch_split = scenario.batch_split or even_split(scenario.n_tokens, n)
    hidden_split = scenario.hidden_split or even_split(scenario.hidden, n)
    options = dict(
        blk=scenario.blk,
        scheme=scenario.memory_scheme,
        activation=scenario.activation,
        non_moe_time=scenario.non_moe_time,
        n_layers=scenario.n_layers,
        global_batch=scenario.n_tokens,
    )

    batches = split_rows(inst.x, batch_split)
    routings = split_routing(inst.routing, batch_split)
    upstream = split_rows(inst.g_y, batch_split)
    sharded = shard_params(inst.params, hidden_split)
    if scheme is SimScheme.DATA_CENTRIC:
        caches = make_caches(n, inst.params)
        outputs, grads, report = run_data_centric(
            batches, routings, upstream, sharded, caches, scenario.devices, **options
        )
    else:
        outputs, grads, report = run_model_centric(
            batches, routings, upstream, sharded, scenario.devices, **options
        )

    y_ref, ref = run_single_device(
        inst.x, inst.params, inst.routing, inst.g_y, blk=scenario.blk,
        scheme=scenario.memory_scheme, activation=scenario.activation,
    )
    y = np.concatenate(outputs, axis=0)
    report.max_output_delta = max_scaled_error(y, y_ref)
    report.max_grad_delta = max(
        max_scaled_error(got, getattr(ref, name)) for name, got in grads.as_dict().items()
    )
    logger.info(
        "%s on %d devices: output delta %.3g, gradient delta %.3g",
        scheme.value, n, report.max_output_delta, report.max_grad_delta,
    )
    return report, y


def save_outputs(path: str, outputs: List[Matrix2D]) -> None:
    """
    Store the outputs, one per scheme, as a scheme x N x D_o tensor file.
    """
    try:
        tensor_write(path, np.stack(outputs))
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc


def run_simulate(
    scenario: ScenarioConfig, tolerance: Optional[float] = None
) -> SimulateReport:
    tolerance = settings.LAYER_TOLERANCE if tolerance is None else tolerance
    schemes = _schemes(scenario)
    results = [run_scheme(scenario, scheme) for scheme in schemes]
    runs = [report for report, _ in results]
    if scenario.output_path is not None:
        save_outputs(scenario.output_path, [y for _, y in results])

    cost = cost_model(scenario)
    n = len(scenario.devices)
    uniform = [1.0 / n] * n
    proportional = capacity_proportions(_latencies(scenario))
    report = SimulateReport(
        tolerance=tolerance,
        passed=all(
            r.max_output_delta <= tolerance and r.max_grad_delta <= tolerance for r in runs
        ),
        runs=runs,
        uniform_makespan={s.value: cost.makespan(s, scenario.n_tokens, uniform) for s in schemes},
        proportional_makespan={
            s.value: cost.makespan(s, scenario.n_tokens, proportional) for s in schemes
        },
    )
    if scenario.workloads:
        report.crossover = crossover_probe(cost, scenario.workloads, proportional)
    if n == 2:
        grid = [(i + 1) / (SWEEP_STEPS + 1) for i in range(SWEEP_STEPS)]
        report.division = [division_sweep(cost, scenario.n_tokens, s, grid) for s in schemes]
    return report
