"""
Forward and backward propagation of one MoE feed-forward layer built from the
expert-specific operators.

For top-k routing the output is the unweighted sum over the k choices, each
choice contributing its own second-layer bias.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List

import numpy as np

from moekit.core.errors import RoutingError, ShapeMismatchError
from moekit.kernels.es_ops import (
    DEFAULT_BLK,
    DEFAULT_COL_TILE,
    DETERMINISTIC,
    EsOutputMode,
    TileRunner,
    esfk,
    esmm,
    ess,
    estmm,
)
from moekit.kernels.routing import ReIndex, RoutingChoice, build_reindex_all
from moekit.kernels.tensor import (
    ActivationKind,
    Matrix2D,
    Tensor3D,
    activation_apply,
    activation_grad,
    as_matrix2d,
    as_tensor3d,
)

logger = logging.getLogger(__name__)


class MemoryScheme(str, Enum):
    NAIVE = "naive"
    MEMORY_EFFICIENT = "memory_efficient"


@dataclass(frozen=True, eq=False)
class MoeLayerParams:
    w1: Tensor3D
    b1: Matrix2D
    w2: Tensor3D
    b2: Matrix2D

    def __post_init__(self) -> None:
        w1 = as_tensor3d(self.w1, "w1")
        w2 = as_tensor3d(self.w2, "w2")
        b1 = as_matrix2d(self.b1, "b1")
        b2 = as_matrix2d(self.b2, "b2")
        n_experts, _, hidden = w1.shape
        if w2.shape[:2] != (n_experts, hidden):
            raise ShapeMismatchError(f"w2 must start with {(n_experts, hidden)}, got {w2.shape}")
        if b1.shape != (n_experts, hidden):
            raise ShapeMismatchError(f"b1 must be {(n_experts, hidden)}, got {b1.shape}")
        if b2.shape != (n_experts, w2.shape[2]):
            raise ShapeMismatchError(f"b2 must be {(n_experts, w2.shape[2])}, got {b2.shape}")
        for name, value in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            object.__setattr__(self, name, value)

    @property
    def n_experts(self) -> int:
        return int(self.w1.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.w1.shape[1])

    @property
    def hidden(self) -> int:
        return int(self.w1.shape[2])

    @property
    def d_out(self) -> int:
        return int(self.w2.shape[2])

    @property
    def num_parameters(self) -> int:
        return int(self.w1.size + self.b1.size + self.w2.size + self.b2.size)

    def w1_t(self) -> Tensor3D:
        return np.ascontiguousarray(self.w1.transpose(0, 2, 1))

    def w2_t(self) -> Tensor3D:
        return np.ascontiguousarray(self.w2.transpose(0, 2, 1))


def init_params(
    n_experts: int,
    d_in: int,
    hidden: int,
    d_out: int,
    seed: int = 0,
    scale: float = 0.5,
) -> MoeLayerParams:
    rng = np.random.default_rng(seed)
    return MoeLayerParams(
        w1=rng.standard_normal((n_experts, d_in, hidden)) * scale,
        b1=rng.standard_normal((n_experts, hidden)) * scale,
        w2=rng.standard_normal((n_experts, hidden, d_out)) * scale,
        b2=rng.standard_normal((n_experts, d_out)) * scale,
    )


@dataclass
class ForwardStash:
    x: Matrix2D
    y1: List[Matrix2D]
    y2: List[Matrix2D]
    reindex: List[ReIndex]
    scheme: MemoryScheme
    activation: ActivationKind
    col_tile: int = DEFAULT_COL_TILE

    @property
    def k(self) -> int:
        return len(self.reindex)

    def activation_values(self) -> int:
        return int(self.x.size + sum(a.size for a in self.y1) + sum(a.size for a in self.y2))


@dataclass
class MoeGrads:
    gw1: Tensor3D
    gb1: Matrix2D
    gw2: Tensor3D
    gb2: Matrix2D
    gx: Matrix2D

    NAMES = ("gw1", "gb1", "gw2", "gb2", "gx")

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}

    def max_abs_diff(self, other: "MoeGrads") -> float:
        return max(
            float(np.abs(a - b).max()) if a.size else 0.0
            for a, b in zip(self.as_dict().values(), other.as_dict().values())
        )

    @classmethod
    def zeros_like(cls, params: MoeLayerParams, n_tokens: int) -> "MoeGrads":
        return cls(
            gw1=np.zeros_like(params.w1),
            gb1=np.zeros_like(params.b1),
            gw2=np.zeros_like(params.w2),
            gb2=np.zeros_like(params.b2),
            gx=np.zeros((n_tokens, params.d_in)),
        )


def moe_forward(
    x: Matrix2D,
    params: MoeLayerParams,
    routing: RoutingChoice,
    blk: int = DEFAULT_BLK,
    scheme: MemoryScheme = MemoryScheme.MEMORY_EFFICIENT,
    activation: ActivationKind = ActivationKind.GELU,
    col_tile: int = DEFAULT_COL_TILE,
    runner: TileRunner = DETERMINISTIC,
):
    """
    Run the layer forward and return ``(y, stash)``.

    The naive scheme materializes one output batch per routing choice and
    sums them; the memory-efficient scheme accumulates every choice straight
    into ``y``.
    """
    x = as_matrix2d(x, "x")
    scheme = MemoryScheme(scheme)
    activation = ActivationKind(activation)
    if x.shape[1] != params.d_in:
        raise ShapeMismatchError(f"x has {x.shape[1]} features, layer expects {params.d_in}")
    if routing.n_tokens != x.shape[0]:
        raise ShapeMismatchError(
            f"routing covers {routing.n_tokens} tokens, batch has {x.shape[0]}"
        )
    if routing.n_experts != params.n_experts:
        raise ShapeMismatchError(
            f"routing targets {routing.n_experts} experts, layer has {params.n_experts}"
        )
    if routing.k > params.n_experts:
        raise RoutingError(f"k={routing.k} exceeds {params.n_experts} experts")

    reindex = build_reindex_all(routing, blk)
    y1, y2 = [], []
    for rx in reindex:
        pre = esmm(x, params.w1, params.b1, rx, col_tile=col_tile, runner=runner)
        y1.append(pre)
        y2.append(activation_apply(activation, pre))

    if scheme is MemoryScheme.NAIVE:
        outputs = [
            esmm(h, params.w2, params.b2, rx, col_tile=col_tile, runner=runner)
            for h, rx in zip(y2, reindex)
        ]
        y = outputs[0].copy()
        for part in outputs[1:]:
            y += part
    else:
        y = np.zeros((x.shape[0], params.d_out))
        for h, rx in zip(y2, reindex):
            esmm(
                h,
                params.w2,
                params.b2,
                rx,
                mode=EsOutputMode.ACCUMULATE,
                dest=y,
                col_tile=col_tile,
                runner=runner,
            )

    stash = ForwardStash(
        x=x,
        y1=y1,
        y2=y2,
        reindex=reindex,
        scheme=scheme,
        activation=activation,
        col_tile=col_tile,
    )
    return y, stash


def moe_backward(
    stash: ForwardStash,
    params: MoeLayerParams,
    g_y: Matrix2D,
    use_fused: bool = False,
    runner: TileRunner = DETERMINISTIC,
) -> MoeGrads:
    """
    Gradients of every parameter and of the input, choices taken in ascending
    order. ``use_fused`` routes each linear layer's three gradients through
    the fused operator.
    """
    g_y = as_matrix2d(g_y, "g_y")
    n_tokens = stash.x.shape[0]
    if g_y.shape != (n_tokens, params.d_out):
        raise ShapeMismatchError(
            f"upstream gradient must be {(n_tokens, params.d_out)}, got {g_y.shape}"
        )
    if stash.x.shape[1] != params.d_in or any(
        h.shape != (n_tokens, params.hidden) for h in stash.y1
    ):
        raise ShapeMismatchError("stash was not produced with these parameters")
    if any(rx.n_experts != params.n_experts for rx in stash.reindex):
        raise ShapeMismatchError("stash routing targets a different expert count")

    grads = MoeGrads.zeros_like(params, n_tokens)
    w1_t, w2_t = params.w1_t(), params.w2_t()
    tile = stash.col_tile

    for y1, y2, rx in zip(stash.y1, stash.y2, stash.reindex):
        if use_fused:
            g_y2, gb2, gw2 = esfk(y2, g_y, w2_t, rx, col_tile=tile, runner=runner)
        else:
            gb2 = ess(g_y, rx, col_tile=tile, runner=runner)
            gw2 = estmm(y2, g_y, rx, col_tile=tile, runner=runner)
            g_y2 = esmm(g_y, w2_t, None, rx, col_tile=tile, runner=runner)

        g_y1 = activation_grad(stash.activation, y1, g_y2)

        if use_fused:
            gx, gb1, gw1 = esfk(stash.x, g_y1, w1_t, rx, col_tile=tile, runner=runner)
        else:
            gb1 = ess(g_y1, rx, col_tile=tile, runner=runner)
            gw1 = estmm(stash.x, g_y1, rx, col_tile=tile, runner=runner)
            gx = esmm(g_y1, w1_t, None, rx, col_tile=tile, runner=runner)

        grads.gb2 += gb2
        grads.gw2 += gw2
        grads.gb1 += gb1
        grads.gw1 += gw1
        grads.gx += gx
    return grads


def estimate_activation_memory(
    n_tokens: int,
    k: int,
    hidden_ratio: float = 4.0,
    scheme: MemoryScheme = MemoryScheme.MEMORY_EFFICIENT,
) -> float:
    """
    Activation footprint in token units: an input or output token is 1 and a
    hidden token is ``hidden_ratio``.
    """
    if n_tokens < 0 or k < 1:
        raise ShapeMismatchError(f"need n_tokens >= 0 and k >= 1, got {n_tokens}, {k}")
    scheme = MemoryScheme(scheme)
    hidden = k * hidden_ratio * n_tokens
    if scheme is MemoryScheme.NAIVE:
        return float(hidden + k * n_tokens + n_tokens)
    return float(hidden + n_tokens)
