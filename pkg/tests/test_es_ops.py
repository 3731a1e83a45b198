import numpy as np
import pytest

from moekit.core.errors import ShapeMismatchError
from moekit.kernels.es_ops import (
    DETERMINISTIC,
    EsOutputMode,
    TileRunner,
    esfk,
    esmm,
    esmm_macs,
    ess,
    estmm,
)
from moekit.kernels.oracle import esmm_reference, ess_reference, estmm_reference
from moekit.kernels.routing import build_reindex


def _instance(seed, n=13, e=3, d1=5, d2=7, blk=4):
    r = np.random.default_rng(seed)
    assignment = r.integers(0, e, size=n)
    return (
        r.standard_normal((n, d1)),
        r.standard_normal((e, d1, d2)),
        r.standard_normal((e, d2)),
        assignment,
        build_reindex(assignment, e, blk),
    )


def test_esmm_example():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    w = np.array([[[1.0], [1.0]], [[2.0], [0.0]]])
    b = np.array([[0.0], [1.0]])
    rx = build_reindex([1, 0], 2, 2)
    np.testing.assert_array_equal(esmm(x, w, b, rx), [[3.0], [7.0]])


def test_esmm_identity_weights(rng):
    x = rng.standard_normal((9, 4))
    w = np.stack([np.eye(4)] * 3)
    rx = build_reindex(rng.integers(0, 3, size=9), 3, 2)
    np.testing.assert_array_equal(esmm(x, w, np.zeros((3, 4)), rx), x)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("col_tile", [1, 3, 32])
def test_esmm_matches_reference(seed, col_tile):
    x, w, b, a, rx = _instance(seed)
    got = esmm(x, w, b, rx, col_tile=col_tile)
    np.testing.assert_allclose(got, esmm_reference(x, w, b, a), rtol=0, atol=1e-12)


def test_esmm_accumulate_adds_two_passes(rng):
    x, w, b, a, rx = _instance(1)
    other = build_reindex(np.roll(a, 1), 3, 4)
    dest = esmm(x, w, b, rx)
    returned = esmm(x, w, b, other, mode=EsOutputMode.ACCUMULATE, dest=dest)
    assert returned is dest
    np.testing.assert_allclose(
        dest, esmm(x, w, b, rx) + esmm(x, w, b, other), rtol=0, atol=1e-12
    )


def test_esmm_accumulate_needs_float64_destination():
    x, w, b, _, rx = _instance(2)
    with pytest.raises(ShapeMismatchError):
        esmm(x, w, b, rx, mode="accumulate")
    with pytest.raises(ShapeMismatchError):
        esmm(x, w, b, rx, mode="accumulate", dest=np.zeros((13, 7), dtype=np.float32))


def test_esmm_shape_checks():
    x, w, b, a, rx = _instance(3)
    with pytest.raises(ShapeMismatchError):
        esmm(x[:, :4], w, b, rx)
    with pytest.raises(ShapeMismatchError):
        esmm(x[:5], w, b, rx)
    with pytest.raises(ShapeMismatchError):
        esmm(x, w, b[:2], rx)


@pytest.mark.parametrize(
    "x, assignment, expected",
    [
        ([[1.0], [2.0]], [0, 0], [[3.0], [0.0]]),
        ([[1, 1], [2, 2], [4, 8]], [0, 1, 0], [[5, 9], [2, 2]]),
    ],
)
def test_ess_examples(x, assignment, expected):
    rx = build_reindex(assignment, 2, 2)
    np.testing.assert_array_equal(ess(np.array(x, dtype=float), rx, 2), expected)


def test_ess_bijective_routing_permutes_rows(rng):
    x = rng.standard_normal((4, 3))
    assignment = np.array([2, 0, 3, 1])
    out = ess(x, build_reindex(assignment, 4, 2), 4)
    np.testing.assert_array_equal(out[assignment], x)


def test_estmm_examples():
    rx = build_reindex([0, 1], 2, 2)
    out = estmm(np.array([[2.0], [3.0]]), np.array([[5.0], [7.0]]), rx, 2)
    np.testing.assert_array_equal(out[:, 0, 0], [10.0, 21.0])
    assert not estmm(np.ones((2, 3)), np.zeros((2, 4)), rx, 2).any()


def test_estmm_single_expert_is_dense(rng):
    x1, x2 = rng.standard_normal((10, 3)), rng.standard_normal((10, 4))
    out = estmm(x1, x2, build_reindex(np.zeros(10, dtype=int), 1, 4), 1)
    np.testing.assert_allclose(out[0], x1.T @ x2, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ess_and_estmm_match_reference(seed):
    x, w, _, a, rx = _instance(seed)
    g = np.random.default_rng(seed + 100).standard_normal((13, 7))
    np.testing.assert_allclose(ess(g, rx, 3), ess_reference(g, a, 3), rtol=0, atol=1e-12)
    np.testing.assert_allclose(
        estmm(x, g, rx, 3), estmm_reference(x, g, a, 3), rtol=0, atol=1e-12
    )


def test_esfk_equals_separate_operators():
    x, w, _, _, rx = _instance(4)
    g = np.random.default_rng(8).standard_normal((13, 7))
    w_t = np.ascontiguousarray(w.transpose(0, 2, 1))
    gx, gb, gw = esfk(x, g, w_t, rx)
    np.testing.assert_array_equal(gx, esmm(g, w_t, None, rx))
    np.testing.assert_array_equal(gb, ess(g, rx))
    np.testing.assert_array_equal(gw, estmm(x, g, rx))


def test_esfk_zero_gradient():
    x, w, _, _, rx = _instance(5)
    w_t = np.ascontiguousarray(w.transpose(0, 2, 1))
    for out in esfk(x, np.zeros((13, 7)), w_t, rx):
        assert not out.any()


def test_esfk_shape_checks():
    x, w, _, _, rx = _instance(6)
    with pytest.raises(ShapeMismatchError):
        esfk(x, np.zeros((13, 6)), w.transpose(0, 2, 1), rx)


@pytest.mark.parametrize("runner", [TileRunner(order_seed=3), TileRunner(workers=4)])
def test_tile_order_does_not_change_results(runner):
    x, w, b, a, rx = _instance(7, n=40, blk=2)
    g = np.random.default_rng(1).standard_normal((40, 7))
    np.testing.assert_allclose(
        esmm(x, w, b, rx, col_tile=2, runner=runner),
        esmm(x, w, b, rx, col_tile=2, runner=DETERMINISTIC),
        rtol=0,
        atol=1e-12,
    )
    np.testing.assert_allclose(
        estmm(x, g, rx, col_tile=2, runner=runner),
        estmm(x, g, rx, col_tile=2),
        rtol=0,
        atol=1e-12,
    )


def test_deterministic_runner_is_bitwise_repeatable():
    x, w, b, _, rx = _instance(9)
    a1 = esmm(x, w, b, rx, col_tile=2)
    a2 = esmm(x, w, b, rx, col_tile=2)
    assert a1.tobytes() == a2.tobytes()
    assert DETERMINISTIC.deterministic
    assert not TileRunner(workers=2).deterministic


def test_esmm_macs_counts_padding():
    rx = build_reindex([0, 1, 0, 0, 1], 2, 2)
    macs = esmm_macs(rx, 3, 4)
    assert macs.token_macs == 5 * 12
    assert macs.tile_macs == 6 * 12
    assert macs.padding_macs == 12
