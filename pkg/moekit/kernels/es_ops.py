"""
Expert-specific operators computed tile by tile over a re-index vector.

Every operator expands into a list of tile works. A work reads its inputs,
computes one output block and returns a ``TileUpdate`` that a ``TileRunner``
writes (or adds) into the destination. Blocks of distinct works are disjoint,
or combined by addition, so tile order never changes the result beyond
rounding.
"""
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import partial
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from moekit.core.errors import ShapeMismatchError
from moekit.kernels.routing import ReIndex
from moekit.kernels.tensor import Matrix2D, Tensor3D, as_matrix2d, as_tensor3d

logger = logging.getLogger(__name__)

DEFAULT_BLK = 8
DEFAULT_COL_TILE = 32


class EsOutputMode(str, Enum):
    WRITE = "write"
    ACCUMULATE = "accumulate"


@dataclass
class TileUpdate:
    dest: np.ndarray
    index: Tuple
    values: np.ndarray
    accumulate: bool

    def apply(self) -> None:
        if self.accumulate:
            self.dest[self.index] += self.values
        else:
            self.dest[self.index] = self.values


TileWork = Callable[[], TileUpdate]


class TileRunner:
    """
    Executes tile works.

    ``workers <= 1`` runs them one after another, in ascending order unless
    ``order_seed`` asks for a seeded permutation. More workers compute tiles
    on a thread pool and apply each update under a lock.
    """

    def __init__(self, workers: int = 1, order_seed: Optional[int] = None) -> None:
        self.workers = max(1, int(workers))
        self.order_seed = order_seed

    @property
    def deterministic(self) -> bool:
        return self.workers == 1

    def _order(self, n: int) -> List[int]:
        order = list(range(n))
        if self.order_seed is not None:
            np.random.default_rng(self.order_seed).shuffle(order)
        return order

    def run(self, works: Sequence[TileWork]) -> None:
        order = self._order(len(works))
        if self.workers == 1:
            for i in order:
                works[i]().apply()
            return

        lock = threading.Lock()

        def task(work: TileWork) -> None:
            update = work()
            with lock:
                update.apply()

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            for future in [pool.submit(task, works[i]) for i in order]:
                future.result()


DETERMINISTIC = TileRunner()


@dataclass(frozen=True)
class MacCount:
    token_macs: int
    tile_macs: int

    @property
    def padding_macs(self) -> int:
        return self.tile_macs - self.token_macs


def _column_tiles(width: int, col_tile: int) -> List[slice]:
    if col_tile < 1:
        raise ShapeMismatchError(f"column tile must be positive, got {col_tile}")
    return [slice(j, min(j + col_tile, width)) for j in range(0, width, col_tile)]


def _check_reindex(rx: ReIndex, n_tokens: int, n_experts: Optional[int] = None) -> None:
    if rx.n_tokens != n_tokens:
        raise ShapeMismatchError(
            f"re-index built for {rx.n_tokens} tokens, input has {n_tokens}"
        )
    if n_experts is not None and rx.n_experts != n_experts:
        raise ShapeMismatchError(
            f"re-index built for {rx.n_experts} experts, operator expects {n_experts}"
        )


# tile bodies


def _esmm_tile(x, w, b, out, expert, tokens, cols, accumulate) -> TileUpdate:
    values = x[tokens] @ w[expert][:, cols]
    if b is not None:
        values = values + b[expert, cols]
    return TileUpdate(out, (tokens, cols), values, accumulate)


def _ess_tile(x, rx, out, expert, cols) -> TileUpdate:
    acc = np.zeros(cols.stop - cols.start)
    for start in range(int(rx.idx[expert]), int(rx.idx[expert + 1]), rx.blk):
        tokens = rx.tile_tokens(start, start + rx.blk)
        if tokens.size:
            acc += x[tokens, cols].sum(axis=0)
    return TileUpdate(out, (expert, cols), acc, False)


def _estmm_tile(x1, x2, rx, out, expert, rows, cols) -> TileUpdate:
    acc = np.zeros((rows.stop - rows.start, cols.stop - cols.start))
    for start in range(int(rx.idx[expert]), int(rx.idx[expert + 1]), rx.blk):
        tokens = rx.tile_tokens(start, start + rx.blk)
        if tokens.size:
            acc += x1[tokens, rows].T @ x2[tokens, cols]
    return TileUpdate(out, (expert, rows, cols), acc, False)


# work lists


def _esmm_works(x, w, b, rx, out, accumulate, col_tile) -> List[TileWork]:
    works = []
    cols_list = _column_tiles(w.shape[2], col_tile)
    for expert, start, stop in rx.tiles():
        tokens = rx.tile_tokens(start, stop)
        if not tokens.size:
            continue
        for cols in cols_list:
            works.append(partial(_esmm_tile, x, w, b, out, expert, tokens, cols, accumulate))
    return works


def _ess_works(x, rx, out, col_tile) -> List[TileWork]:
    works = []
    for expert in range(rx.n_experts):
        if rx.idx[expert] == rx.idx[expert + 1]:
            continue
        for cols in _column_tiles(x.shape[1], col_tile):
            works.append(partial(_ess_tile, x, rx, out, expert, cols))
    return works


def _estmm_works(x1, x2, rx, out, col_tile) -> List[TileWork]:
    works = []
    for expert in range(rx.n_experts):
        if rx.idx[expert] == rx.idx[expert + 1]:
            continue
        for rows in _column_tiles(x1.shape[1], col_tile):
            for cols in _column_tiles(x2.shape[1], col_tile):
                works.append(partial(_estmm_tile, x1, x2, rx, out, expert, rows, cols))
    return works


# operators


def esmm(
    x: Matrix2D,
    w: Tensor3D,
    b: Optional[Matrix2D],
    rx: ReIndex,
    mode: EsOutputMode = EsOutputMode.WRITE,
    dest: Optional[Matrix2D] = None,
    col_tile: int = DEFAULT_COL_TILE,
    runner: TileRunner = DETERMINISTIC,
) -> Matrix2D:
    """
    Expert-specific matrix multiplication.

    Row ``t`` of the result is ``x[t] @ w[e] + b[e]`` for the expert ``e`` the
    re-index vector routes ``t`` to. In accumulate mode the rows are added into
    ``dest`` in place and ``dest`` is returned.
    """
    x = as_matrix2d(x, "x")
    w = as_tensor3d(w, "w")
    n_tokens, d_in = x.shape
    n_experts, w_in, d_out = w.shape
    if w_in != d_in:
        raise ShapeMismatchError(f"x has {d_in} features, weights expect {w_in}")
    _check_reindex(rx, n_tokens, n_experts)
    if b is not None:
        b = as_matrix2d(b, "b")
        if b.shape != (n_experts, d_out):
            raise ShapeMismatchError(f"bias must be {(n_experts, d_out)}, got {b.shape}")

    mode = EsOutputMode(mode)
    if mode is EsOutputMode.ACCUMULATE:
        if dest is None:
            raise ShapeMismatchError("accumulate mode needs a destination")
        if dest.shape != (n_tokens, d_out) or dest.dtype != np.float64:
            raise ShapeMismatchError(
                f"destination must be float64 {(n_tokens, d_out)}, got {dest.dtype} {dest.shape}"
            )
        out = dest
    else:
        out = np.zeros((n_tokens, d_out))

    runner.run(_esmm_works(x, w, b, rx, out, mode is EsOutputMode.ACCUMULATE, col_tile))
    return out


def ess(
    x: Matrix2D,
    rx: ReIndex,
    n_experts: Optional[int] = None,
    col_tile: int = DEFAULT_COL_TILE,
    runner: TileRunner = DETERMINISTIC,
) -> Matrix2D:
    """
    Expert-specific summation: row ``e`` sums the tokens routed to expert ``e``.
    """
    x = as_matrix2d(x, "x")
    _check_reindex(rx, x.shape[0], n_experts)
    out = np.zeros((rx.n_experts, x.shape[1]))
    runner.run(_ess_works(x, rx, out, col_tile))
    return out


def estmm(
    x1: Matrix2D,
    x2: Matrix2D,
    rx: ReIndex,
    n_experts: Optional[int] = None,
    col_tile: int = DEFAULT_COL_TILE,
    runner: TileRunner = DETERMINISTIC,
) -> Tensor3D:
    """
    Expert-specific transposed matrix multiplication: slice ``e`` is
    ``x1[T_e].T @ x2[T_e]`` over the tokens ``T_e`` routed to ``e``.
    """
    x1 = as_matrix2d(x1, "x1")
    x2 = as_matrix2d(x2, "x2")
    if x1.shape[0] != x2.shape[0]:
        raise ShapeMismatchError(
            f"token counts differ: {x1.shape[0]} and {x2.shape[0]}"
        )
    _check_reindex(rx, x1.shape[0], n_experts)
    out = np.zeros((rx.n_experts, x1.shape[1], x2.shape[1]))
    runner.run(_estmm_works(x1, x2, rx, out, col_tile))
    return out


def esfk(
    x: Matrix2D,
    g: Matrix2D,
    w_t: Tensor3D,
    rx: ReIndex,
    col_tile: int = DEFAULT_COL_TILE,
    runner: TileRunner = DETERMINISTIC,
) -> Tuple[Matrix2D, Matrix2D, Tensor3D]:
    """
    Fused backward of one expert-specific linear layer.

    Returns ``(grad_x, grad_b, grad_w)`` from a single pass over the combined
    work list of esmm(g, w_t), ess(g) and estmm(x, g).
    """
    x = as_matrix2d(x, "x")
    g = as_matrix2d(g, "g")
    w_t = as_tensor3d(w_t, "w_t")
    n_tokens, d_in = x.shape
    n_experts, d_out, wt_in = w_t.shape
    if g.shape != (n_tokens, d_out):
        raise ShapeMismatchError(f"gradient must be {(n_tokens, d_out)}, got {g.shape}")
    if wt_in != d_in:
        raise ShapeMismatchError(f"transposed weights map to {wt_in}, x has {d_in}")
    _check_reindex(rx, n_tokens, n_experts)

    grad_x = np.zeros((n_tokens, d_in))
    grad_b = np.zeros((n_experts, d_out))
    grad_w = np.zeros((n_experts, d_in, d_out))
    works = (
        _esmm_works(g, w_t, None, rx, grad_x, False, col_tile)
        + _ess_works(g, rx, grad_b, col_tile)
        + _estmm_works(x, g, rx, grad_w, col_tile)
    )
    runner.run(works)
    return grad_x, grad_b, grad_w


def esmm_macs(rx: ReIndex, d_in: int, d_out: int) -> MacCount:
    token_macs = 0
    tile_macs = 0
    for _, start, stop in rx.tiles():
        token_macs += rx.tile_tokens(start, stop).size * d_in * d_out
        tile_macs += (stop - start) * d_in * d_out
    return MacCount(token_macs=token_macs, tile_macs=tile_macs)
