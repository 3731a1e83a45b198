"""
Command-line front end.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error (a file that cannot be read or written counts as one). Reports go to
stdout (or ``--out``); logs go to stderr.
"""
import argparse
import csv
import io
import json
import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ValidationError

from moekit.core.config import settings
from moekit.core.errors import ConfigError, MoeKitError
from moekit.core.logging import configure_logging
from moekit.kernels.moe_layer import MemoryScheme
from moekit.kernels.routing import RoutingDistribution
from moekit.kernels.tensor import ActivationKind
from moekit.schemas.config import (
    AllocationKind,
    DeviceSpec,
    GradcheckConfig,
    LatencyConfig,
    OutputFormat,
    ProbeConfig,
    RunConfig,
    ScenarioConfig,
    SimScheme,
    load_json_config,
)
from moekit.schemas.reports import CsvReport
from moekit.services import EXIT_OK, EXIT_USAGE, exit_code

logger = logging.getLogger(__name__)

# flag destination -> RunConfig field
LAYER_FLAGS = {
    "n": "n_tokens",
    "experts": "n_experts",
    "topk": "topk",
    "din": "d_in",
    "hidden": "hidden",
    "dout": "d_out",
    "blk": "blk",
    "seed": "seed",
    "activation": "activation",
    "routing": "routing_path",
    "input": "input_path",
}
RUN_FLAGS = {
    **LAYER_FLAGS,
    "col_tile": "col_tile",
    "scheme": "scheme",
    "capacity_factor": "capacity_factor",
    "distribution": "distribution",
    "zipf_s": "zipf_s",
    "instances": "instances",
    "workers": "workers",
}


def _choices(enum) -> List[str]:
    return [member.value for member in enum]


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--format", choices=_choices(OutputFormat), default=OutputFormat.JSON.value)
    p.add_argument("--record", action="store_true", help="store the run in the history database")
    p.add_argument("--log-level", default=None)


def _add_layer(p: argparse.ArgumentParser) -> None:
    # defaults stay None so a --config document is only overridden by explicit flags
    p.add_argument("--n", type=int, help="tokens in the batch")
    p.add_argument("--experts", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--din", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--dout", type=int)
    p.add_argument("--blk", type=int, help="token tile size")
    p.add_argument("--seed", type=int)
    p.add_argument("--activation", choices=_choices(ActivationKind))
    p.add_argument("--routing", help="routing CSV (token_index,choice_index,expert_id)")
    p.add_argument("--input", help="tensor file holding the N x D_in input batch")
    p.add_argument("--config", help="JSON document with default field values")


def _add_run(p: argparse.ArgumentParser) -> None:
    _add_layer(p)
    p.add_argument("--col-tile", type=int)
    p.add_argument("--scheme", choices=_choices(MemoryScheme))
    p.add_argument("--capacity-factor", type=float)
    p.add_argument("--distribution", choices=_choices(RoutingDistribution))
    p.add_argument("--zipf-s", type=float)
    p.add_argument("--instances", type=int, help="random instances per verify suite")
    p.add_argument("--workers", type=int, help="tile worker threads")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--zero-upstream", action="store_true")
    _add_output(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moekit",
        description="Expert-specific MoE operators: verification, benchmarks, simulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("verify", "run the seeded equivalence suites"),
        ("gradcheck", "compare gradients with central finite differences"),
        ("bench", "count redundancy and activation memory, time the operators"),
    ):
        _add_run(sub.add_parser(name, help=help_text))

    p = sub.add_parser("simulate", help="run a multi-device scenario")
    _add_layer(p)
    p.add_argument("--sim-scheme", choices=_choices(SimScheme))
    p.add_argument("--scheme", choices=_choices(MemoryScheme))
    p.add_argument("--devices", type=int, help="number of identical devices")
    p.add_argument("--workloads", type=_int_list, help="crossover sweep, e.g. 64,128,256")
    p.add_argument("--non-moe-time", type=float)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--save-output", help="write the outputs, one per scheme, to a tensor file")
    _add_output(p)

    p = sub.add_parser("probe", help="time the proxy workload on this machine")
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--matrix-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    p.add_argument("--device", default=None)
    _add_output(p)

    p = sub.add_parser("allocate", help="divide batch or hidden dimension by latency")
    p.add_argument("--latencies", type=_float_list)
    p.add_argument("--total", type=int)
    p.add_argument("--kind", choices=_choices(AllocationKind))
    p.add_argument("--config", help="JSON latency document")
    _add_output(p)

    p = sub.add_parser("serve", help="serve the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--log-level", default=None)
    return parser


def _overrides(args: argparse.Namespace, flags: Dict[str, str]) -> Dict[str, Any]:
    return {
        field: getattr(args, dest)
        for dest, field in flags.items()
        if getattr(args, dest, None) is not None
    }


def _file_values(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return data


def run_config(args: argparse.Namespace) -> RunConfig:
    model = GradcheckConfig if args.command == "gradcheck" else RunConfig
    data = _file_values(args.config)
    data.update(_overrides(args, RUN_FLAGS))
    data.update(
        subcommand=args.command,
        inject_fault=args.inject_fault or data.get("inject_fault", False),
        zero_upstream=args.zero_upstream or data.get("zero_upstream", False),
        config_path=args.config,
        out=args.out,
        format=args.format,
    )
    return model(**data)


def scenario_config(args: argparse.Namespace) -> ScenarioConfig:
    data = _file_values(args.config)
    data.update(_overrides(args, LAYER_FLAGS))
    extra = {
        "sim_scheme": "scheme",
        "scheme": "memory_scheme",
        "workloads": "workloads",
        "non_moe_time": "non_moe_time",
        "n_layers": "n_layers",
        "save_output": "output_path",
    }
    data.update(_overrides(args, extra))
    if args.devices is not None:
        data["devices"] = [DeviceSpec(id=i).dict() for i in range(args.devices)]
    return ScenarioConfig(**data)


def latency_config(args: argparse.Namespace) -> LatencyConfig:
    if args.config is not None:
        config = load_json_config(args.config, LatencyConfig)
        updates = _overrides(args, {"latencies": "latencies", "total": "total", "kind": "kind"})
        return LatencyConfig(**{**config.dict(), **updates})
    if args.latencies is None or args.total is None:
        raise ConfigError("allocate needs --latencies and --total, or --config")
    return LatencyConfig(
        latencies=args.latencies,
        total=args.total,
        kind=args.kind or AllocationKind.BATCH.value,
    )


def render(report: BaseModel, fmt: OutputFormat) -> str:
    if OutputFormat(fmt) is OutputFormat.CSV:
        if not isinstance(report, CsvReport):
            raise ConfigError(f"{type(report).__name__} has no CSV form")
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=report.CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(report.csv_rows())
        return buffer.getvalue()
    return report.json(indent=2) + "\n"


def emit(report: BaseModel, fmt: OutputFormat, out: Optional[str]) -> None:
    text = render(report, fmt)
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _record(subcommand: str, config: BaseModel, code: int, report: BaseModel) -> None:
    from moekit.core.deps import session_scope
    from moekit.db.session import init_db
    from moekit.services.records import record_run

    init_db()
    with session_scope() as db:
        record_run(db, subcommand, config, code, report)


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("moekit.main:app", host=args.host, port=args.port)
    return EXIT_OK


def _dispatch(args: argparse.Namespace) -> Tuple[BaseModel, BaseModel]:
    from moekit.services.allocate import run_allocate, run_probe
    from moekit.services.bench import run_bench
    from moekit.services.gradcheck import run_gradcheck
    from moekit.services.simulate import run_simulate
    from moekit.services.verify import run_verify

    if args.command == "simulate":
        scenario = scenario_config(args)
        return scenario, run_simulate(scenario)
    if args.command == "allocate":
        latencies = latency_config(args)
        return latencies, run_allocate(latencies)
    if args.command == "probe":
        probe = ProbeConfig(
            n_iterations=args.iterations,
            matrix_size=args.matrix_size,
            seed=args.seed,
            device=args.device,
        )
        return probe, run_probe(probe.n_iterations, probe.matrix_size, probe.seed, probe.device)

    config = run_config(args)
    runners: Dict[str, Callable[[RunConfig], BaseModel]] = {
        "verify": run_verify,
        "gradcheck": run_gradcheck,
        "bench": run_bench,
    }
    return config, runners[args.command](config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.log_level)

    if args.command == "serve":
        return _serve(args)

    try:
        config, report = _dispatch(args)
        code = exit_code(report)
        emit(report, args.format, args.out)
    except (ValidationError, MoeKitError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE

    if args.record or settings.RECORD_RUNS:
        _record(args.command, config, code, report)
    return code
