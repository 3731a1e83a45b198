"""
Conventional dispatch & combine formulation of the MoE layer.

Tokens are regrouped into dense per-expert batches (optionally padded or
truncated to a fixed capacity), pushed through per-expert dense matrix
products and scattered back. It is the independent reference the
expert-specific layer is checked against, and the baseline whose padding and
dropping redundancy is counted.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from moekit.core.errors import ConfigError, RoutingError, ShapeMismatchError
from moekit.kernels.moe_layer import MoeGrads, MoeLayerParams
from moekit.kernels.routing import RoutingChoice
from moekit.kernels.tensor import (
    ActivationKind,
    Matrix2D,
    activation_apply,
    activation_grad,
    as_matrix2d,
)
from moekit.schemas.reports import RedundancyReport

logger = logging.getLogger(__name__)

PADDING = -1


@dataclass
class DispatchedBatch:
    """
    ``origins[e][r]`` is the ``(token, choice)`` pair behind row ``r`` of
    ``batches[e]``, or ``(-1, -1)`` for a zero padding row.
    """

    batches: List[Matrix2D]
    origins: List[np.ndarray]
    dropped: List[tuple]
    n_tokens: int
    capacity: Optional[int]

    @property
    def n_experts(self) -> int:
        return len(self.batches)

    @property
    def padded_rows(self) -> int:
        return int(sum((o[:, 0] == PADDING).sum() for o in self.origins))

    @property
    def dropped_tokens(self) -> int:
        return len(self.dropped)

    @property
    def rows(self) -> List[int]:
        return [int(b.shape[0]) for b in self.batches]


@dataclass
class OracleStash:
    x: Matrix2D
    dispatched: DispatchedBatch
    h1: List[Matrix2D]
    h2: List[Matrix2D]
    activation: ActivationKind


def _as_assignments(assignment) -> np.ndarray:
    if isinstance(assignment, RoutingChoice):
        return assignment.assignments
    a = np.asarray(assignment, dtype=np.int64)
    return a.reshape(1, -1) if a.ndim == 1 else a


def dispatch(
    x: Matrix2D,
    assignment,
    capacity: Optional[int] = None,
    n_experts: Optional[int] = None,
) -> DispatchedBatch:
    """
    Group ``(token, choice)`` rows per expert, ordered by token then choice.

    With a finite capacity the rows beyond it are dropped and short experts
    are padded with zero rows up to it.
    """
    x = as_matrix2d(x, "x")
    assignments = _as_assignments(assignment)
    k, n_tokens = assignments.shape
    if n_tokens != x.shape[0]:
        raise ShapeMismatchError(f"assignment covers {n_tokens} tokens, x has {x.shape[0]}")
    if n_experts is None:
        n_experts = (
            assignment.n_experts
            if isinstance(assignment, RoutingChoice)
            else int(assignments.max()) + 1 if assignments.size else 1
        )
    if assignments.size and (assignments.min() < 0 or assignments.max() >= n_experts):
        raise RoutingError(f"expert ids must lie in [0, {n_experts})")
    if capacity is not None and capacity < 0:
        raise ShapeMismatchError(f"capacity must be non-negative, got {capacity}")

    # (token, choice) pairs in token-major order
    tokens = np.repeat(np.arange(n_tokens), k)
    choices = np.tile(np.arange(k), n_tokens)
    experts = assignments.T.ravel()

    batches, origins, dropped = [], [], []
    for e in range(n_experts):
        mask = experts == e
        pairs = np.stack([tokens[mask], choices[mask]], axis=1)
        if capacity is not None:
            dropped.extend((int(t), int(c)) for t, c in pairs[capacity:])
            pairs = pairs[:capacity]
            short = capacity - pairs.shape[0]
            if short > 0:
                pairs = np.vstack([pairs, np.full((short, 2), PADDING)])
        rows = np.zeros((pairs.shape[0], x.shape[1]))
        real = pairs[:, 0] != PADDING
        rows[real] = x[pairs[real, 0]]
        batches.append(rows)
        origins.append(pairs.astype(np.int64).reshape(-1, 2))
    dropped.sort()
    return DispatchedBatch(
        batches=batches,
        origins=origins,
        dropped=dropped,
        n_tokens=n_tokens,
        capacity=capacity,
    )


def combine(
    d: DispatchedBatch,
    outputs: Sequence[Matrix2D],
    out: Optional[Matrix2D] = None,
) -> Matrix2D:
    """
    Scatter-add every non-padding row back to its token; padding rows and
    dropped tokens contribute nothing.
    """
    if len(outputs) != d.n_experts:
        raise ShapeMismatchError(f"expected {d.n_experts} expert outputs, got {len(outputs)}")
    widths = {o.shape[1] for o in outputs if o.ndim == 2}
    width = widths.pop() if len(widths) == 1 else None
    if width is None and out is None:
        raise ShapeMismatchError("expert outputs disagree on width")
    if out is None:
        out = np.zeros((d.n_tokens, width))
    for e, (rows, origin) in enumerate(zip(outputs, d.origins)):
        if rows.shape[0] != origin.shape[0]:
            raise ShapeMismatchError(
                f"expert {e} returned {rows.shape[0]} rows for {origin.shape[0]} dispatched"
            )
        real = origin[:, 0] != PADDING
        np.add.at(out, origin[real, 0], rows[real])
    return out


def oracle_forward(
    x: Matrix2D,
    params: MoeLayerParams,
    routing: RoutingChoice,
    capacity: Optional[int] = None,
    activation: ActivationKind = ActivationKind.GELU,
):
    x = as_matrix2d(x, "x")
    if x.shape[1] != params.d_in or routing.n_tokens != x.shape[0]:
        raise ShapeMismatchError("batch, routing and parameters disagree on shape")
    if routing.n_experts != params.n_experts:
        raise ShapeMismatchError("routing and parameters disagree on expert count")
    activation = ActivationKind(activation)
    d = dispatch(x, routing, capacity, params.n_experts)

    h1, h2, outputs = [], [], []
    for e, xe in enumerate(d.batches):
        pre = xe @ params.w1[e] + params.b1[e]
        act = activation_apply(activation, pre)
        h1.append(pre)
        h2.append(act)
        outputs.append(act @ params.w2[e] + params.b2[e])

    y = np.zeros((x.shape[0], params.d_out))
    combine(d, outputs, out=y)
    return y, OracleStash(x=x, dispatched=d, h1=h1, h2=h2, activation=activation)


def oracle_backward(stash: OracleStash, params: MoeLayerParams, g_y: Matrix2D) -> MoeGrads:
    g_y = as_matrix2d(g_y, "g_y")
    d = stash.dispatched
    if g_y.shape != (d.n_tokens, params.d_out):
        raise ShapeMismatchError(f"upstream gradient must be {(d.n_tokens, params.d_out)}")

    grads = MoeGrads.zeros_like(params, d.n_tokens)
    gx_rows = []
    for e, (xe, origin) in enumerate(zip(d.batches, d.origins)):
        real = origin[:, 0] != PADDING
        g_out = np.zeros((xe.shape[0], params.d_out))
        g_out[real] = g_y[origin[real, 0]]

        grads.gb2[e] = g_out.sum(axis=0)
        grads.gw2[e] = stash.h2[e].T @ g_out
        g_h1 = activation_grad(stash.activation, stash.h1[e], g_out @ params.w2[e].T)
        grads.gb1[e] = g_h1.sum(axis=0)
        grads.gw1[e] = xe.T @ g_h1
        gx_rows.append(g_h1 @ params.w1[e].T)

    combine(d, gx_rows, out=grads.gx)
    return grads


def expert_capacity(n_tokens: int, n_experts: int, k: int, capacity_factor: float) -> int:
    if capacity_factor <= 0:
        raise ShapeMismatchError(f"capacity factor must be positive, got {capacity_factor}")
    return int(math.ceil(capacity_factor * k * n_tokens / n_experts))


def count_redundancy(
    routing: RoutingChoice,
    d_in: int,
    hidden: int,
    d_out: int,
    capacity_factor: float,
) -> RedundancyReport:
    """
    Token-MAC counts of the expert-specific layer against a capacity-bounded
    dispatch of the same routing.

    Capacity factors below 1 are refused, so ``token_macs_oracle`` never
    falls below ``token_macs_expert_specific``.
    """
    if capacity_factor < 1.0:
        raise ConfigError(f"redundancy needs capacity_factor >= 1, got {capacity_factor}")
    capacity = expert_capacity(routing.n_tokens, routing.n_experts, routing.k, capacity_factor)
    per_row = d_in * hidden + hidden * d_out
    counts = routing.expert_counts()
    padded = int(np.clip(capacity - counts, 0, None).sum())
    dropped = int(np.clip(counts - capacity, 0, None).sum())
    report = RedundancyReport(
        n_tokens=routing.n_tokens,
        n_experts=routing.n_experts,
        k=routing.k,
        capacity=capacity,
        capacity_factor=capacity_factor,
        token_macs_expert_specific=routing.k * routing.n_tokens * per_row,
        token_macs_oracle=routing.n_experts * capacity * per_row,
        padded_rows=padded,
        dropped_tokens=dropped,
    )
    logger.debug("redundancy %s", report.json())
    return report


# brute-force references for the expert-specific operators


def esmm_reference(x, w, b, assignment) -> Matrix2D:
    assignment = np.asarray(assignment, dtype=np.int64).ravel()
    out = np.zeros((x.shape[0], w.shape[2]))
    for t, e in enumerate(assignment):
        out[t] = x[t] @ w[e] + (0.0 if b is None else b[e])
    return out


def ess_reference(x, assignment, n_experts: int) -> Matrix2D:
    assignment = np.asarray(assignment, dtype=np.int64).ravel()
    return np.stack([x[assignment == e].sum(axis=0) for e in range(n_experts)])


def estmm_reference(x1, x2, assignment, n_experts: int):
    assignment = np.asarray(assignment, dtype=np.int64).ravel()
    return np.stack(
        [x1[assignment == e].T @ x2[assignment == e] for e in range(n_experts)]
    )
