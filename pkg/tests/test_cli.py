import csv
import io
import json

import numpy as np
import pytest

from moekit.cli import main
from moekit.core.deps import session_scope
from moekit.kernels.routing import synthesize_routing, write_routing_csv
from moekit.kernels.tensor_io import tensor_read, tensor_write
from moekit.models.run import RunRecord
from moekit.services import EXIT_FAILURE, EXIT_OK, EXIT_USAGE

SMALL = ["--n", "12", "--experts", "3", "--topk", "2", "--din", "4", "--hidden", "6", "--dout", "3"]


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_verify_default_exit_zero(capsys):
    assert main(["verify", "--instances", "3"]) == EXIT_OK
    report = _json(capsys)
    assert report["passed"] is True
    assert all(s["max_deviation"] <= 1e-10 for s in report["suites"])


def test_verify_injected_fault_fails(capsys):
    assert main(["verify", "--instances", "2", "--inject-fault"]) == EXIT_FAILURE
    assert _json(capsys)["passed"] is False


def test_topk_above_experts_is_a_usage_error(capsys):
    assert main(["verify", "--experts", "2", "--topk", "3"]) == EXIT_USAGE
    assert capsys.readouterr().out == ""


@pytest.mark.parametrize(
    "argv",
    [
        ["nonsense"],
        ["verify", "--n", "0"],
        ["verify", "--config", "/does/not/exist.json"],
        ["allocate", "--latencies", "1,2"],
        ["allocate", "--latencies", "1,x", "--total", "3"],
    ],
)
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_config_file_with_flag_override(tmp_path, capsys):
    path = tmp_path / "verify.json"
    path.write_text(json.dumps({"instances": 2, "n_tokens": 8, "seed": 4}))
    assert main(["verify", "--config", str(path), "--seed", "9"]) == EXIT_OK
    report = _json(capsys)
    assert report["instances"] == 2
    assert report["seed"] == 9


def test_gradcheck(capsys):
    assert main(["gradcheck", "--activation", "identity"]) == EXIT_OK
    report = _json(capsys)
    assert [e["tensor"] for e in report["entries"]] == ["w1", "b1", "w2", "b2", "x"]


def test_bench_csv(capsys):
    assert main(["bench", *SMALL, "--format", "csv"]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["k"] for r in rows] == ["1", "2"]
    assert "token_macs_oracle" in rows[0]


def test_simulate(capsys):
    argv = ["simulate", *SMALL, "--blk", "2", "--devices", "2", "--workloads", "16,256,4096"]
    assert main(argv) == EXIT_OK
    report = _json(capsys)
    assert report["passed"] is True
    assert len(report["runs"]) == 2
    assert report["crossover"]["rows"][0]["workload"] == 16


def test_allocate_csv(capsys):
    argv = ["allocate", "--latencies", "4.58,3.06", "--total", "100", "--format", "csv"]
    assert main(argv) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [int(r["share"]) for r in rows] == [40, 60]


def test_allocate_from_latency_file(tmp_path, capsys):
    path = tmp_path / "latencies.json"
    path.write_text(json.dumps({"latencies": [3.28, 9.42], "total": 100, "kind": "hidden"}))
    assert main(["allocate", "--config", str(path)]) == EXIT_OK
    plan = _json(capsys)
    assert plan["shares"] == [74, 26]
    assert plan["kind"] == "hidden"


def test_probe(capsys):
    assert main(["probe", "--iterations", "1", "--matrix-size", "8", "--device", "gpu0"]) == 0
    assert _json(capsys)["device"] == "gpu0"


def test_out_file(tmp_path, capsys):
    out = tmp_path / "plan.json"
    assert main(["allocate", "--latencies", "1,3", "--total", "8", "--out", str(out)]) == 0
    assert capsys.readouterr().out == ""
    assert json.loads(out.read_text())["shares"] == [6, 2]


def test_probe_csv(capsys):
    argv = ["probe", "--iterations", "0", "--matrix-size", "4", "--format", "csv"]
    assert main(argv) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "device,elapsed_s,n_iterations,matrix_size"


def _allocate_runs():
    with session_scope() as db:
        return db.query(RunRecord).filter(RunRecord.subcommand == "allocate").count()


def test_record_stores_the_run(capsys):
    before = _allocate_runs()
    assert main(["allocate", "--latencies", "1,1", "--total", "4", "--record"]) == 0
    assert _allocate_runs() == before + 1


def test_unwritable_out_is_a_usage_error(tmp_path):
    out = tmp_path / "missing" / "plan.json"
    argv = ["allocate", "--latencies", "1,2", "--total", "3", "--out", str(out)]
    assert main(argv) == EXIT_USAGE
    assert not out.exists()


@pytest.fixture
def routing_csv(tmp_path):
    path = tmp_path / "routing.csv"
    write_routing_csv(path, synthesize_routing(12, 3, 2, "round_robin"))
    return path


def test_bench_with_routing_file(routing_csv, capsys):
    argv = ["bench", *SMALL, "--routing", str(routing_csv), "--capacity-factor", "1"]
    assert main(argv) == EXIT_OK
    (row,) = _json(capsys)["rows"]
    assert row["k"] == 2
    assert row["distribution"] == "file"
    assert row["padded_rows"] == 0
    assert row["dropped_tokens"] == 0


def test_routing_file_must_match_the_dims(routing_csv, capsys):
    argv = ["bench", *SMALL, "--topk", "1", "--routing", str(routing_csv)]
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().out == ""


def test_missing_routing_file_is_a_usage_error(tmp_path):
    assert main(["bench", *SMALL, "--routing", str(tmp_path / "none.csv")]) == EXIT_USAGE


def test_verify_rejects_a_routing_file(routing_csv):
    assert main(["verify", "--routing", str(routing_csv)]) == EXIT_USAGE


def test_gradcheck_with_routing_file(tmp_path, capsys):
    path = tmp_path / "routing.csv"
    write_routing_csv(path, synthesize_routing(6, 3, 2, "fixed"))
    assert main(["gradcheck", "--activation", "gelu", "--routing", str(path)]) == EXIT_OK
    assert _json(capsys)["passed"] is True


def test_simulate_with_tensor_files(tmp_path, routing_csv, capsys):
    x = np.random.default_rng(3).standard_normal((12, 4))
    inputs, outputs = tmp_path / "x.hxt", tmp_path / "y.hxt"
    tensor_write(inputs, x)
    argv = [
        "simulate", *SMALL, "--blk", "2",
        "--routing", str(routing_csv), "--input", str(inputs), "--save-output", str(outputs),
    ]
    assert main(argv) == EXIT_OK
    assert _json(capsys)["passed"] is True
    y = tensor_read(outputs)
    assert y.shape == (2, 12, 3)
    np.testing.assert_allclose(y[0], y[1], rtol=0, atol=1e-10)


def test_input_file_must_match_the_dims(tmp_path):
    inputs = tmp_path / "x.hxt"
    tensor_write(inputs, np.zeros((5, 4)))
    assert main(["simulate", *SMALL, "--input", str(inputs)]) == EXIT_USAGE
