"""
Top-k routing choices and the padded re-index vector.

The re-index vector groups token indices by expert and pads every expert
segment with -1 up to a multiple of the tile size, so every tile of the
expert-specific operators touches a single expert.
"""
import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from moekit.core.errors import RoutingError

logger = logging.getLogger(__name__)

IntVector = npt.NDArray[np.int64]

CSV_COLUMNS = ("token_index", "choice_index", "expert_id")


class RoutingDistribution(str, Enum):
    UNIFORM = "uniform"
    ZIPF = "zipf"
    FIXED = "fixed"
    ROUND_ROBIN = "round_robin"


@dataclass(frozen=True, eq=False)
class RoutingChoice:
    """
    ``assignments[i, t]`` is the expert chosen by token ``t`` for choice ``i``.
    """

    assignments: IntVector
    n_experts: int

    def __post_init__(self) -> None:
        a = np.array(self.assignments, dtype=np.int64)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2 or a.shape[0] < 1:
            raise RoutingError(f"assignments must be k x N, got shape {a.shape}")
        if self.n_experts < 1:
            raise RoutingError("n_experts must be positive")
        if a.size and (a.min() < 0 or a.max() >= self.n_experts):
            raise RoutingError(f"expert ids must lie in [0, {self.n_experts})")
        if a.shape[0] > self.n_experts:
            raise RoutingError(f"k={a.shape[0]} exceeds n_experts={self.n_experts}")
        if a.shape[0] > 1 and a.shape[1]:
            ordered = np.sort(a, axis=0)
            if (np.diff(ordered, axis=0) == 0).any():
                raise RoutingError("a token selects the same expert more than once")
        a.setflags(write=False)
        object.__setattr__(self, "assignments", a)

    @property
    def k(self) -> int:
        return int(self.assignments.shape[0])

    @property
    def n_tokens(self) -> int:
        return int(self.assignments.shape[1])

    def choice(self, i: int) -> IntVector:
        return self.assignments[i]

    def expert_counts(self) -> IntVector:
        """
        Rows each expert receives over all k choices.
        """
        return np.bincount(self.assignments.ravel(), minlength=self.n_experts)

    def take_tokens(self, tokens: slice) -> "RoutingChoice":
        return RoutingChoice(self.assignments[:, tokens], self.n_experts)

    @staticmethod
    def concat(parts: List["RoutingChoice"]) -> "RoutingChoice":
        if not parts:
            raise RoutingError("nothing to concatenate")
        experts = {p.n_experts for p in parts}
        ks = {p.k for p in parts}
        if len(experts) != 1 or len(ks) != 1:
            raise RoutingError("routing parts disagree on k or n_experts")
        return RoutingChoice(
            np.concatenate([p.assignments for p in parts], axis=1), parts[0].n_experts
        )


@dataclass(frozen=True, eq=False)
class ReIndex:
    v: IntVector
    idx: IntVector
    blk: int
    n_tokens: int

    @property
    def n_experts(self) -> int:
        return int(self.idx.shape[0] - 1)

    @property
    def padded_length(self) -> int:
        return int(self.v.shape[0])

    def segment(self, expert: int) -> IntVector:
        return self.v[self.idx[expert] : self.idx[expert + 1]]

    def tiles(self) -> Iterator[Tuple[int, int, int]]:
        """
        Yield ``(expert, start, stop)`` for every BLK-sized tile of ``v``.
        """
        for e in range(self.n_experts):
            for start in range(int(self.idx[e]), int(self.idx[e + 1]), self.blk):
                yield e, start, start + self.blk

    def tile_tokens(self, start: int, stop: int) -> IntVector:
        tokens = self.v[start:stop]
        return tokens[tokens >= 0]

    def assignment(self) -> IntVector:
        out = np.full(self.n_tokens, -1, dtype=np.int64)
        for e in range(self.n_experts):
            seg = self.segment(e)
            out[seg[seg >= 0]] = e
        return out


def build_reindex(assignment, n_experts: int, blk: int) -> ReIndex:
    """
    Group token indices by expert, ascending within each expert, and pad each
    segment with -1 to ``blk * ceil(count / blk)`` entries.
    """
    assignment = np.asarray(assignment, dtype=np.int64).ravel()
    if blk < 1:
        raise RoutingError(f"tile size must be at least 1, got {blk}")
    if n_experts < 1:
        raise RoutingError("n_experts must be positive")
    if assignment.size and (assignment.min() < 0 or assignment.max() >= n_experts):
        raise RoutingError(f"expert ids must lie in [0, {n_experts})")

    counts = np.bincount(assignment, minlength=n_experts)
    padded = (counts + blk - 1) // blk * blk
    idx = np.zeros(n_experts + 1, dtype=np.int64)
    np.cumsum(padded, out=idx[1:])

    order = np.argsort(assignment, kind="stable")
    count_starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    experts = assignment[order]
    positions = idx[experts] + (np.arange(assignment.size) - count_starts[experts])

    v = np.full(int(idx[-1]), -1, dtype=np.int64)
    v[positions] = order
    v.setflags(write=False)
    idx.setflags(write=False)
    return ReIndex(v=v, idx=idx, blk=blk, n_tokens=int(assignment.size))


def build_reindex_all(routing: RoutingChoice, blk: int) -> List[ReIndex]:
    return [build_reindex(routing.choice(i), routing.n_experts, blk) for i in range(routing.k)]


def check_reindex(rx: ReIndex, assignment) -> List[str]:
    """
    Return a description of every violated re-index invariant (empty if valid).
    """
    assignment = np.asarray(assignment, dtype=np.int64).ravel()
    problems = []
    n_experts = rx.n_experts
    if rx.idx[0] != 0 or rx.idx[-1] != rx.padded_length:
        problems.append("idx does not span the re-index vector")
    if (np.diff(rx.idx) < 0).any():
        problems.append("idx is not nondecreasing")
    if (np.diff(rx.idx) % rx.blk).any():
        problems.append("a segment length is not divisible by blk")

    tokens = rx.v[rx.v >= 0]
    if not np.array_equal(np.sort(tokens), np.arange(assignment.size)):
        problems.append("tokens in v are not a permutation of 0..N-1")
    if rx.padded_length - assignment.size > n_experts * (rx.blk - 1):
        problems.append("padding exceeds E * (blk - 1)")

    counts = np.bincount(assignment, minlength=n_experts)
    for e in range(n_experts):
        seg = rx.segment(e)
        real = seg[seg >= 0]
        if real.size and (assignment[real] != e).any():
            problems.append(f"segment {e} holds tokens routed elsewhere")
        if (np.diff(real) <= 0).any():
            problems.append(f"segment {e} is not in ascending token order")
        if seg.size != (counts[e] + rx.blk - 1) // rx.blk * rx.blk:
            problems.append(f"segment {e} length is not blk * ceil(count / blk)")
    return problems


def synthesize_routing(
    n_tokens: int,
    n_experts: int,
    k: int,
    distribution: Union[RoutingDistribution, str] = RoutingDistribution.UNIFORM,
    seed: int = 0,
    zipf_s: float = 1.0,
    fixed_expert: int = 0,
) -> RoutingChoice:
    """
    Draw k distinct experts per token; deterministic for a given seed.
    """
    distribution = RoutingDistribution(distribution)
    if k < 1 or k > n_experts:
        raise RoutingError(f"k={k} must lie in [1, n_experts={n_experts}]")
    tokens = np.arange(n_tokens, dtype=np.int64)

    if distribution is RoutingDistribution.FIXED:
        if not 0 <= fixed_expert < n_experts:
            raise RoutingError(f"fixed expert {fixed_expert} out of range")
        rows = [np.full(n_tokens, (fixed_expert + j) % n_experts) for j in range(k)]
        return RoutingChoice(np.stack(rows), n_experts)

    if distribution is RoutingDistribution.ROUND_ROBIN:
        rows = [(tokens + j) % n_experts for j in range(k)]
        return RoutingChoice(np.stack(rows), n_experts)

    rng = np.random.default_rng(seed)
    if distribution is RoutingDistribution.UNIFORM:
        log_weights = np.zeros(n_experts)
    else:
        log_weights = -zipf_s * np.log(np.arange(1, n_experts + 1, dtype=np.float64))
    # Gumbel top-k samples k experts without replacement
    keys = log_weights + rng.gumbel(size=(n_tokens, n_experts))
    chosen = np.argsort(-keys, axis=1, kind="stable")[:, :k]
    return RoutingChoice(chosen.T.copy(), n_experts)


def write_routing_csv(path: Union[str, Path], routing: RoutingChoice) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for t in range(routing.n_tokens):
            for i in range(routing.k):
                writer.writerow((t, i, int(routing.assignments[i, t])))


def read_routing_csv(path: Union[str, Path], n_experts: Optional[int] = None) -> RoutingChoice:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise RoutingError(f"routing CSV must have columns {','.join(CSV_COLUMNS)}")
        try:
            rows = [
                (int(r["token_index"]), int(r["choice_index"]), int(r["expert_id"]))
                for r in reader
            ]
        except (TypeError, ValueError) as exc:
            raise RoutingError(f"routing CSV holds a non-integer entry: {exc}") from exc
    if not rows:
        raise RoutingError("routing CSV is empty")
    n_tokens = max(r[0] for r in rows) + 1
    k = max(r[1] for r in rows) + 1
    if len(rows) != n_tokens * k:
        raise RoutingError("routing CSV does not cover every (token, choice) pair")
    assignments = np.full((k, n_tokens), -1, dtype=np.int64)
    for t, i, e in rows:
        assignments[i, t] = e
    if (assignments < 0).any():
        raise RoutingError("routing CSV has duplicate or negative entries")
    if n_experts is None:
        n_experts = int(assignments.max()) + 1
    return RoutingChoice(assignments, n_experts)
