"""Command-line entry points: serve the API, run scaling benchmarks,
and materialize built-in fixture corpora as NDJSON files."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from . import bench
from .fixtures import BUILTIN_CORPORA, write_fixture

DEFAULT_CHECKPOINTS = (1_000, 5_000, 10_000, 50_000, 100_000, 200_000)


def _ints(text: str) -> tuple:
    return tuple(int(part) for part in text.split(",") if part)


def _floats(text: str) -> tuple:
    return tuple(float(part) for part in text.split(",") if part)


def _parse_tokens(pairs: Sequence[str]) -> dict:
    tokens = {}
    for pair in pairs:
        user, sep, token = pair.partition(":")
        if not sep or not user or not token:
            raise SystemExit(f"--token expects USER:TOKEN, got {pair!r}")
        tokens[user] = token
    return tokens


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vaultrag",
        description="Permission-aware retrieval assistant for research records",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the HTTP API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument(
        "--fixture",
        default=None,
        help="built-in corpus name (%s) or NDJSON path"
        % "|".join(sorted(BUILTIN_CORPORA)),
    )
    serve.add_argument("--dim", type=int, default=1024)
    serve.add_argument("--workers", type=int, default=2)
    serve.add_argument("--instance-url", default="")
    serve.add_argument(
        "--token",
        action="append",
        default=[],
        metavar="USER:TOKEN",
        help="register a user with a bearer token (repeatable)",
    )

    bench_cmd = sub.add_parser("bench", help="scaling measurements")
    bench_sub = bench_cmd.add_subparsers(dest="bench_command", required=True)

    latency = bench_sub.add_parser("latency", help="filtered query latency")
    latency.add_argument("--n-max", type=int, default=200_000)
    latency.add_argument(
        "--checkpoints",
        type=_ints,
        default=None,
        help="comma-separated corpus sizes (default: log-spaced up to n-max)",
    )
    latency.add_argument("--fractions", type=_floats, default=(0.01, 0.1, 1.0))
    latency.add_argument(
        "--record-mode",
        choices=(bench.MODE_FIXED_TWO, bench.MODE_PER_RECORD),
        default=bench.MODE_FIXED_TWO,
    )
    latency.add_argument("--vectors-per-record", type=int, default=100)
    latency.add_argument("--trials", type=int, default=100)
    latency.add_argument("--seed", type=int, default=0)
    latency.add_argument("--dim", type=int, default=1024)
    latency.add_argument("--k", type=int, default=50)
    latency.add_argument("--out", default="results.csv")

    memory = bench_sub.add_parser("memory", help="index storage growth")
    memory.add_argument(
        "--sizes", type=_ints, default=(10_000, 25_000, 50_000, 100_000)
    )
    memory.add_argument("--dim", type=int, default=1024)
    memory.add_argument("--seed", type=int, default=0)
    memory.add_argument("--out", default="mem.csv")

    fixtures_cmd = sub.add_parser("fixtures", help="fixture corpus tools")
    fixtures_sub = fixtures_cmd.add_subparsers(dest="fixtures_command", required=True)
    build = fixtures_sub.add_parser("build", help="write a built-in corpus as NDJSON")
    build.add_argument("--name", choices=sorted(BUILTIN_CORPORA), required=True)
    build.add_argument("--out", required=True)

    return parser


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .api import ServiceConfig, create_app

    config = ServiceConfig(
        host=args.host,
        port=args.port,
        instance_url=args.instance_url,
        fixture=args.fixture,
        tokens=_parse_tokens(args.token),
        dim=args.dim,
        workers=args.workers,
    )
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
    return 0


def _cmd_bench_latency(args: argparse.Namespace) -> int:
    checkpoints = args.checkpoints
    if checkpoints is None:
        checkpoints = tuple(
            c for c in DEFAULT_CHECKPOINTS if c < args.n_max
        ) + (args.n_max,)
    cfg = bench.BenchConfig(
        n_max=args.n_max,
        checkpoints=checkpoints,
        dim=args.dim,
        k=args.k,
        access_fractions=args.fractions,
        record_mode=args.record_mode,
        vectors_per_record=args.vectors_per_record,
        trials=args.trials,
        seed=args.seed,
    )
    result = bench.run_latency_experiment(cfg, out=args.out)
    for point in result.latency_points:
        print(
            f"n={point.n:>8d} fraction={point.fraction:<5g} "
            f"mean={point.mean_latency_s * 1000:8.3f} ms "
            f"std={point.std_latency_s * 1000:7.3f} ms "
            f"oracle_checks={point.oracle_checks} "
            f"violations={point.oracle_violations}"
        )
    for (fraction, kind), fit in sorted(result.latency_fits.items()):
        print(
            f"fit fraction={fraction:<5g} {kind}: "
            f"a={fit.a:.6g} b={fit.b:.6g} r2={fit.r_squared:.4f}"
        )
    print(f"wrote {args.out}")
    return 0


def _cmd_bench_memory(args: argparse.Namespace) -> int:
    result = bench.run_memory_experiment(
        sizes=args.sizes, dim=args.dim, seed=args.seed, out=args.out
    )
    for point in result.memory_points:
        graph_kb = point.graph_bytes / point.n / 1024
        total_kb = point.total_bytes / point.n / 1024
        print(
            f"n={point.n:>8d} graph={graph_kb:6.3f} kB/vector "
            f"total={total_kb:6.3f} kB/vector "
            f"(reference deployment: {bench.REFERENCE_GRAPH_KB_PER_VECTOR} "
            f"and {bench.REFERENCE_TOTAL_KB_PER_VECTOR})"
        )
    for name, fit in sorted(result.memory_fits.items()):
        print(f"fit {name}: a={fit.a:.6g} b={fit.b:.6g} r2={fit.r_squared:.6f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_fixtures_build(args: argparse.Namespace) -> int:
    rows = BUILTIN_CORPORA[args.name]()
    count = write_fixture(args.out, rows)
    print(f"wrote {count} records to {args.out}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return _cmd_serve(args)
    if args.command == "bench" and args.bench_command == "latency":
        return _cmd_bench_latency(args)
    if args.command == "bench" and args.bench_command == "memory":
        return _cmd_bench_memory(args)
    if args.command == "fixtures" and args.fixtures_command == "build":
        return _cmd_fixtures_build(args)
    raise SystemExit(2)


if __name__ == "__main__":
    sys.exit(main())
