import numpy as np
import pytest

import moekit.services.verify as verify_service
from moekit.core.errors import ConfigError
from moekit.schemas.config import (
    DeviceSpec,
    GradcheckConfig,
    LatencyConfig,
    RunConfig,
    ScenarioConfig,
)
from moekit.services import EXIT_FAILURE, EXIT_OK, exit_code
from moekit.services.allocate import run_allocate, run_probe
from moekit.services.bench import run_bench
from moekit.services.gradcheck import run_gradcheck
from moekit.services.instances import layer_instance, random_instance
from moekit.services.simulate import even_split, run_simulate
from moekit.services.verify import SUITES, run_verify


def test_random_instances_stay_within_bounds():
    r = np.random.default_rng(0)
    bounds = RunConfig(n_tokens=10, n_experts=3, topk=2, d_in=4, hidden=5, d_out=2)
    for _ in range(20):
        inst = random_instance(r, bounds)
        assert inst.x.shape[0] <= 10
        assert inst.params.n_experts <= 3
        assert inst.routing.k <= 2
        assert inst.blk in (2, 4, 8)


def test_layer_instance_is_seeded():
    config = RunConfig(n_tokens=6, n_experts=3, topk=2, d_in=2, hidden=3, d_out=2)
    a, b = layer_instance(config), layer_instance(config)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.routing.assignments, b.routing.assignments)
    assert not layer_instance(config, zero_upstream=True).g_y.any()


def test_verify_passes():
    report = run_verify(RunConfig(instances=5))
    assert report.passed
    assert [s.name for s in report.suites] == [name for name, _, _ in SUITES]
    for suite in report.suites:
        assert suite.max_deviation <= 1e-10
    assert exit_code(report) == EXIT_OK


def test_verify_catches_injected_fault():
    report = run_verify(RunConfig(instances=3, inject_fault=True))
    assert not report.passed
    failed = [s.name for s in report.suites if not s.passed]
    assert failed == ["operator-oracle"]
    assert exit_code(report) == EXIT_FAILURE


def test_verify_with_worker_threads():
    report = run_verify(RunConfig(instances=3, workers=3), suites=["layer-oracle"])
    assert report.passed
    assert len(report.suites) == 1


def test_random_instance_uses_an_explicit_tile_size():
    r = np.random.default_rng(0)
    bounds = RunConfig(n_tokens=10, n_experts=3, topk=2, d_in=4, hidden=5, d_out=2)
    assert {random_instance(r, bounds, 16).blk for _ in range(30)} == {16}


def test_verify_honours_an_explicit_blk(monkeypatch):
    seen = []

    def recording(rng, bounds, blk=None):
        inst = random_instance(rng, bounds, blk)
        seen.append(inst.blk)
        return inst

    monkeypatch.setattr(verify_service, "random_instance", recording)
    assert run_verify(RunConfig(instances=3, blk=16)).passed
    assert set(seen) == {16}

    seen.clear()
    assert run_verify(RunConfig(instances=6)).passed
    assert set(seen) <= {2, 4, 8}


def test_scheme_suite_runs_on_the_configured_workers(monkeypatch):
    runners = []
    forward = verify_service.moe_forward

    def recording(*args, **kwargs):
        runners.append(kwargs.get("runner"))
        return forward(*args, **kwargs)

    monkeypatch.setattr(verify_service, "moe_forward", recording)
    report = run_verify(RunConfig(instances=2, workers=3), suites=["scheme-equivalence"])
    assert report.passed
    assert runners
    assert all(r is not None and r.workers == 3 for r in runners)


def test_verify_refuses_routing_files(tmp_path):
    with pytest.raises(ConfigError):
        run_verify(RunConfig(instances=1, routing_path=str(tmp_path / "r.csv")))


@pytest.mark.slow
@pytest.mark.parametrize(
    "suite, count",
    [("operator-oracle", 200), ("layer-oracle", 100), ("fused-equivalence", 100)],
)
def test_verify_suites_at_full_instance_counts(suite, count):
    (result,) = run_verify(RunConfig(instances=count), suites=[suite]).suites
    assert result.instances == count
    assert result.passed
    assert result.max_deviation <= result.tolerance


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(4))
def test_verify_seed_sweep(seed):
    assert run_verify(RunConfig(instances=20, seed=seed)).passed


@pytest.mark.parametrize("activation", ["gelu", "relu", "identity"])
def test_gradcheck_passes(activation):
    report = run_gradcheck(GradcheckConfig(activation=activation))
    assert report.passed
    assert [e.tensor for e in report.entries] == ["w1", "b1", "w2", "b2", "x"]
    assert all(e.max_rel_error <= 1e-6 for e in report.entries)


def test_gradcheck_zero_upstream():
    report = run_gradcheck(GradcheckConfig(zero_upstream=True))
    assert all(e.analytic == 0.0 and e.numeric == 0.0 for e in report.entries)


def test_gradcheck_refuses_large_instances():
    with pytest.raises(ConfigError):
        run_gradcheck(GradcheckConfig(n_experts=8, d_in=32, hidden=64, d_out=32, topk=2))


def test_bench_balanced_routing_has_no_padding():
    config = RunConfig(
        n_tokens=32, n_experts=4, topk=4, d_in=4, hidden=16, d_out=4,
        distribution="round_robin", capacity_factor=1.0,
    )
    report = run_bench(config)
    assert [row.k for row in report.rows] == [1, 2, 3, 4]
    assert all(row.padded_rows == 0 and row.dropped_tokens == 0 for row in report.rows)
    efficient = [row.memory_efficient for row in report.rows]
    assert report.hidden_ratio == 4.0
    assert np.diff(efficient).tolist() == [4 * 32] * 3


def test_bench_skewed_routing_costs_the_oracle_more():
    config = RunConfig(
        n_tokens=256, n_experts=8, topk=2, d_in=4, hidden=8, d_out=4,
        distribution="zipf", zipf_s=1.5,
    )
    for row in run_bench(config).rows:
        assert row.token_macs_oracle > row.token_macs_expert_specific


def _scenario(**kwargs):
    values = dict(n_tokens=16, n_experts=4, topk=2, d_in=3, hidden=8, d_out=2, blk=2)
    values.update(kwargs)
    return ScenarioConfig(**values)


def test_simulate_two_devices():
    report = run_simulate(_scenario(workloads=[16, 256, 4096, 65536]))
    assert report.passed
    assert [r.scheme.value for r in report.runs] == ["data_centric", "model_centric"]
    assert all(r.max_output_delta <= 1e-10 for r in report.runs)
    assert len(report.division) == 2
    assert report.crossover is not None
    assert set(report.uniform_makespan) == {"data_centric", "model_centric"}


def test_simulate_uneven_splits():
    report = run_simulate(_scenario(batch_split=[12, 4], hidden_split=[6, 2]))
    assert report.passed


def test_simulate_single_device_has_no_communication():
    report = run_simulate(_scenario(devices=[DeviceSpec(id=0)], scheme="model_centric"))
    assert report.passed
    assert report.division == []
    assert all(c.time == 0.0 for r in report.runs for c in r.comm)


def test_even_split():
    assert even_split(10, 3) == [4, 3, 3]


def test_run_allocate_and_probe():
    plan = run_allocate(LatencyConfig(latencies=[4.58, 3.06], total=100, labels=["a", "b"]))
    assert plan.shares == [40, 60]
    probe = run_probe(2, 16, device="cpu0")
    assert probe.device == "cpu0"
    assert probe.elapsed_s >= 0.0
