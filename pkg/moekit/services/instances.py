from dataclasses import dataclass
from typing import Optional

import numpy as np

from moekit.core.errors import ConfigError, TensorFormatError
from moekit.kernels.moe_layer import MoeLayerParams, init_params
from moekit.kernels.routing import (
    RoutingChoice,
    RoutingDistribution,
    read_routing_csv,
    synthesize_routing,
)
from moekit.kernels.tensor import Matrix2D, as_matrix2d, random_matrix
from moekit.kernels.tensor_io import tensor_read
from moekit.schemas.config import LayerConfig

BLK_CHOICES = (2, 4, 8)
MAX_TOKENS = 64
MAX_EXPERTS = 8
MAX_TOPK = 4
MAX_FEATURES = 32


@dataclass
class LayerInstance:
    x: Matrix2D
    params: MoeLayerParams
    routing: RoutingChoice
    g_y: Matrix2D
    blk: int


def load_routing(config: LayerConfig) -> RoutingChoice:
    """
    Read ``config.routing_path`` and check it against the configured dims.
    """
    try:
        routing = read_routing_csv(config.routing_path, config.n_experts)
    except OSError as exc:
        raise ConfigError(f"cannot read routing {config.routing_path}: {exc}") from exc
    if (routing.k, routing.n_tokens) != (config.topk, config.n_tokens):
        raise ConfigError(
            f"{config.routing_path} holds k={routing.k}, N={routing.n_tokens}; "
            f"configured topk={config.topk}, n_tokens={config.n_tokens}"
        )
    return routing


def load_input(config: LayerConfig) -> Matrix2D:
    try:
        x = as_matrix2d(tensor_read(config.input_path), "input", finite=True)
    except OSError as exc:
        raise ConfigError(f"cannot read input {config.input_path}: {exc}") from exc
    except TensorFormatError as exc:
        raise ConfigError(f"{config.input_path}: {exc}") from exc
    if x.shape != (config.n_tokens, config.d_in):
        raise ConfigError(
            f"{config.input_path} is {x.shape}, expected {(config.n_tokens, config.d_in)}"
        )
    return x


def layer_instance(
    config: LayerConfig,
    distribution: RoutingDistribution = RoutingDistribution.UNIFORM,
    zipf_s: float = 1.0,
    zero_upstream: bool = False,
) -> LayerInstance:
    """
    The single instance a config describes, seeded by ``config.seed``.

    A routing CSV or an input tensor file named in the config replaces the
    synthesized routing or input.
    """
    rng = np.random.default_rng(config.seed)
    params = init_params(
        config.n_experts, config.d_in, config.hidden, config.d_out, seed=config.seed + 1
    )
    if config.routing_path is not None:
        routing = load_routing(config)
    else:
        routing = synthesize_routing(
            config.n_tokens, config.n_experts, config.topk, distribution, config.seed, zipf_s
        )
    x = random_matrix(config.n_tokens, config.d_in, rng)
    if config.input_path is not None:
        x = load_input(config)
    g_y = (
        np.zeros((config.n_tokens, config.d_out))
        if zero_upstream
        else random_matrix(config.n_tokens, config.d_out, rng)
    )
    return LayerInstance(x=x, params=params, routing=routing, g_y=g_y, blk=config.blk)


def random_instance(
    rng: np.random.Generator, bounds: LayerConfig, blk: Optional[int] = None
) -> LayerInstance:
    """
    A small random instance whose dims stay within ``bounds``; the tile size
    is ``blk`` when given, else drawn from ``BLK_CHOICES``.
    """
    n_tokens = int(rng.integers(1, min(bounds.n_tokens, MAX_TOKENS) + 1))
    n_experts = int(rng.integers(1, min(bounds.n_experts, MAX_EXPERTS) + 1))
    k = int(rng.integers(1, min(bounds.topk, n_experts, MAX_TOPK) + 1))
    d_in = int(rng.integers(1, min(bounds.d_in, MAX_FEATURES) + 1))
    hidden = int(rng.integers(1, min(bounds.hidden, MAX_FEATURES) + 1))
    d_out = int(rng.integers(1, min(bounds.d_out, MAX_FEATURES) + 1))
    seed = int(rng.integers(0, 2**31))
    drawn = int(rng.choice(BLK_CHOICES))
    return LayerInstance(
        x=random_matrix(n_tokens, d_in, rng),
        params=init_params(n_experts, d_in, hidden, d_out, seed=seed),
        routing=synthesize_routing(n_tokens, n_experts, k, RoutingDistribution.UNIFORM, seed),
        g_y=random_matrix(n_tokens, d_out, rng),
        blk=drawn if blk is None else blk,
    )
