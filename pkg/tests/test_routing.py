import numpy as np
import pytest

from moekit.core.errors import RoutingError
from moekit.kernels.routing import (
    ReIndex,
    RoutingChoice,
    build_reindex,
    build_reindex_all,
    check_reindex,
    read_routing_csv,
    synthesize_routing,
    write_routing_csv,
)


@pytest.mark.parametrize(
    "assignment, n_experts, blk, idx, v",
    [
        ([0, 1, 0, 0, 1], 2, 2, [0, 4, 6], [0, 2, 3, -1, 1, 4]),
        ([0, 0, 0, 0], 1, 4, [0, 4], [0, 1, 2, 3]),
        ([1, 1], 3, 2, [0, 0, 2, 2], [0, 1]),
    ],
)
def test_build_reindex_examples(assignment, n_experts, blk, idx, v):
    rx = build_reindex(assignment, n_experts, blk)
    np.testing.assert_array_equal(rx.idx, idx)
    np.testing.assert_array_equal(rx.v, v)
    assert check_reindex(rx, assignment) == []


def test_build_reindex_rejects_out_of_range():
    with pytest.raises(RoutingError):
        build_reindex([0, 2], 2, 2)
    with pytest.raises(RoutingError):
        build_reindex([0, -1], 2, 2)


def test_empty_batch():
    rx = build_reindex([], 3, 4)
    np.testing.assert_array_equal(rx.idx, [0, 0, 0, 0])
    assert rx.padded_length == 0


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("blk", [1, 2, 3, 8])
def test_reindex_invariants_on_random_routings(seed, blk):
    r = np.random.default_rng(seed)
    n, e = int(r.integers(1, 50)), int(r.integers(1, 9))
    assignment = r.integers(0, e, size=n)
    rx = build_reindex(assignment, e, blk)
    assert check_reindex(rx, assignment) == []
    assert rx.padded_length - n <= e * (blk - 1)
    np.testing.assert_array_equal(rx.assignment(), assignment)


def test_reindex_invariants_hold_for_500_routings():
    r = np.random.default_rng(500)
    for _ in range(500):
        n, e, blk = int(r.integers(0, 200)), int(r.integers(1, 17)), int(r.integers(1, 17))
        assignment = r.integers(0, e, size=n)
        rx = build_reindex(assignment, e, blk)
        assert check_reindex(rx, assignment) == []
        assert rx.padded_length - n <= e * (blk - 1)


def test_check_reindex_reports_violations():
    assignment = [0, 1, 0, 0, 1]
    good = build_reindex(assignment, 2, 2)
    swapped = ReIndex(
        v=np.array([2, 0, 3, -1, 1, 4]), idx=good.idx, blk=2, n_tokens=5
    )
    assert any("ascending" in p for p in check_reindex(swapped, assignment))
    wrong_expert = ReIndex(
        v=np.array([0, 1, 3, -1, 2, 4]), idx=good.idx, blk=2, n_tokens=5
    )
    assert any("routed elsewhere" in p for p in check_reindex(wrong_expert, assignment))


def test_tiles_cover_single_experts():
    rx = build_reindex([0, 1, 0, 0, 1], 2, 2)
    assert list(rx.tiles()) == [(0, 0, 2), (0, 2, 4), (1, 4, 6)]
    np.testing.assert_array_equal(rx.tile_tokens(2, 4), [3])


def test_build_reindex_all_segment_lengths():
    r = RoutingChoice(np.array([[0, 0, 1], [1, 1, 0]]), 2)
    rxs = build_reindex_all(r, 2)
    assert len(rxs) == 2
    for rx in rxs:
        np.testing.assert_array_equal(np.diff(rx.idx), [2, 2])


def test_build_reindex_all_identical_choices_are_identical():
    r = RoutingChoice(np.array([[0, 1, 2], [1, 2, 0]]), 3)
    a, b = build_reindex_all(r, 2), build_reindex_all(r, 2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.v, y.v)
        np.testing.assert_array_equal(x.idx, y.idx)


def test_routing_choice_validation():
    with pytest.raises(RoutingError):
        RoutingChoice(np.array([[0, 1], [0, 2]]), 3)  # token 0 picks expert 0 twice
    with pytest.raises(RoutingError):
        RoutingChoice(np.array([[0, 3]]), 3)
    with pytest.raises(RoutingError):
        RoutingChoice(np.zeros((3, 2), dtype=int) + np.arange(3)[:, None], 2)


def test_routing_choice_split_and_concat():
    r = synthesize_routing(10, 4, 2, "uniform", seed=1)
    parts = [r.take_tokens(slice(0, 3)), r.take_tokens(slice(3, 10))]
    np.testing.assert_array_equal(RoutingChoice.concat(parts).assignments, r.assignments)
    assert r.expert_counts().sum() == 20


def test_synthesize_fixed_expert():
    r = synthesize_routing(4, 3, 1, "fixed", fixed_expert=0)
    np.testing.assert_array_equal(r.assignments, [[0, 0, 0, 0]])


def test_synthesize_uniform_is_deterministic():
    a = synthesize_routing(100, 8, 3, "uniform", seed=42)
    b = synthesize_routing(100, 8, 3, "uniform", seed=42)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    for t in range(100):
        assert len(set(a.assignments[:, t])) == 3


def test_synthesize_zipf_favours_expert_zero():
    r = synthesize_routing(10_000, 8, 1, "zipf", seed=0, zipf_s=1.0)
    counts = r.expert_counts()
    assert counts[0] == counts.max()
    assert (counts[0] > counts[1:]).all()


def test_synthesize_round_robin_is_balanced():
    r = synthesize_routing(16, 4, 2, "round_robin")
    np.testing.assert_array_equal(r.expert_counts(), [8, 8, 8, 8])


def test_synthesize_rejects_k_above_e():
    with pytest.raises(RoutingError):
        synthesize_routing(4, 2, 3)


def test_routing_csv_round_trip(tmp_path):
    r = synthesize_routing(6, 5, 2, "uniform", seed=9)
    path = tmp_path / "routing.csv"
    write_routing_csv(path, r)
    assert path.read_text().splitlines()[0] == "token_index,choice_index,expert_id"
    back = read_routing_csv(path, n_experts=5)
    np.testing.assert_array_equal(back.assignments, r.assignments)


def test_routing_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("token,expert\n0,1\n")
    with pytest.raises(RoutingError):
        read_routing_csv(path)
