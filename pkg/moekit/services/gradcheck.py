"""
Central finite differences against the analytic backward pass.
"""
import logging
from typing import Dict, Tuple

import numpy as np

from moekit.core.config import settings
from moekit.core.errors import ConfigError
from moekit.kernels.moe_layer import MoeLayerParams, moe_backward, moe_forward
from moekit.kernels.tensor import ActivationKind
from moekit.schemas.config import RunConfig
from moekit.schemas.reports import GradcheckEntry, GradcheckReport
from moekit.services.instances import LayerInstance, layer_instance

logger = logging.getLogger(__name__)

MAX_PARAMETERS = 5000
KINK_MARGIN = 1e-4
MAX_RESEEDS = 10
RELATIVE_STEP = 1e-6

# gradient name -> perturbed value
TENSORS = (("gw1", "w1"), ("gb1", "b1"), ("gw2", "w2"), ("gb2", "b2"), ("gx", "x"))


def _loss(values: Dict[str, np.ndarray], inst: LayerInstance, config: RunConfig) -> float:
    params = MoeLayerParams(w1=values["w1"], b1=values["b1"], w2=values["w2"], b2=values["b2"])
    y, _ = moe_forward(
        values["x"], params, inst.routing, blk=inst.blk, scheme=config.scheme,
        activation=config.activation, col_tile=config.col_tile,
    )
    return float(np.sum(inst.g_y * y))


def _near_kink(inst: LayerInstance, config: RunConfig) -> int:
    _, stash = moe_forward(inst.x, inst.params, inst.routing, blk=inst.blk)
    return int(sum((np.abs(pre) < KINK_MARGIN).sum() for pre in stash.y1))


def _instance(config: RunConfig) -> Tuple[LayerInstance, int, int]:
    """
    Draw the configured instance; under ReLU, shift the seed until no
    pre-activation sits within ``KINK_MARGIN`` of the kink.
    """
    reseeds = 0
    while True:
        shifted = config.copy(update={"seed": config.seed + reseeds})
        inst = layer_instance(shifted, config.distribution, config.zipf_s, config.zero_upstream)
        near = _near_kink(inst, config)
        if config.activation is not ActivationKind.RELU or near == 0 or reseeds >= MAX_RESEEDS:
            return inst, near, reseeds
        reseeds += 1


def numeric_gradient(
    values: Dict[str, np.ndarray], name: str, inst: LayerInstance, config: RunConfig
) -> np.ndarray:
    base = values[name]
    grad = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        theta = base[index]
        step = RELATIVE_STEP * (1.0 + abs(theta))
        probe = dict(values)
        probe[name] = base.copy()
        probe[name][index] = theta + step
        up = _loss(probe, inst, config)
        probe[name][index] = theta - step
        down = _loss(probe, inst, config)
        grad[index] = (up - down) / (2.0 * step)
    return grad


def run_gradcheck(config: RunConfig) -> GradcheckReport:
    if config.num_parameters + config.n_tokens * config.d_in > MAX_PARAMETERS:
        raise ConfigError(
            f"gradient check is limited to {MAX_PARAMETERS} values, "
            f"this instance has {config.num_parameters + config.n_tokens * config.d_in}"
        )
    inst, near, reseeds = _instance(config)
    if near:
        logger.warning("%d pre-activations lie within %g of the kink", near, KINK_MARGIN)

    y, stash = moe_forward(
        inst.x, inst.params, inst.routing, blk=inst.blk, scheme=config.scheme,
        activation=config.activation, col_tile=config.col_tile,
    )
    analytic = moe_backward(stash, inst.params, inst.g_y).as_dict()
    values = {"w1": inst.params.w1, "b1": inst.params.b1, "w2": inst.params.w2,
              "b2": inst.params.b2, "x": inst.x}

    entries = []
    for grad_name, value_name in TENSORS:
        a = analytic[grad_name]
        n = numeric_gradient(values, value_name, inst, config)
        rel = np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
        entries.append(
            GradcheckEntry(
                tensor=value_name,
                max_rel_error=float(rel[worst]),
                worst_index=[int(i) for i in worst],
                analytic=float(a[worst]),
                numeric=float(n[worst]),
            )
        )
        logger.info("%s: max relative error %.3g", value_name, rel[worst])

    tolerance = settings.GRAD_TOLERANCE
    return GradcheckReport(
        n_parameters=inst.params.num_parameters,
        tolerance=tolerance,
        entries=entries,
        near_kink=near,
        reseeds=reseeds,
        passed=all(e.max_rel_error <= tolerance for e in entries),
    )
