"""Command line entry point: ``pipevo <command> [flags]``.

Exit codes: 0 success, 2 configuration or input error, 3 empty population
(no individual could be evaluated within the budget), 1 for anything else
(``verify`` also uses 1 for an inconsistent report).
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from pathlib import Path

from pipevo import __version__, bench
from pipevo.errors import EmptyPopulation, ParseError, PipevoError, SingleClassDataset, TooFewRows
from pipevo.graph import Binding

EXIT_CONFIG = 2
EXIT_EMPTY = 3

log = logging.getLogger("pipevo")


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_dataset_flags(p: argparse.ArgumentParser, default_synth: str = "moons") -> None:
    g = p.add_argument_group("dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--dataset", metavar="CSV", help="CSV file with a header row")
    src.add_argument("--synth", choices=["moons", "blobs"], default=None,
                     help=f"synthetic dataset (default {default_synth})")
    g.add_argument("--label", default="label", help="label column of --dataset (default: label)")
    g.add_argument("--rows", type=int, help="rows of the synthetic dataset")
    g.add_argument("--features", type=int, default=10, help="features of synthetic blobs (default 10)")
    g.add_argument("--noise", type=float, default=0.1, help="noise of synthetic moons (default 0.1)")
    p.set_defaults(default_synth=default_synth)


def _add_run_flags(p: argparse.ArgumentParser, jobs_list: bool = False) -> None:
    p.add_argument("--timeout", type=_positive_float, default=60.0, help="optimization budget in seconds")
    if jobs_list:
        p.add_argument("--n-jobs", type=_int_list, default=None,
                       help=f"comma-separated worker counts (default 1,{bench.default_jobs()})")
    else:
        p.add_argument("--n-jobs", type=int, default=1, help="parallel evaluation workers")
    p.add_argument("--cache", choices=["on", "off", "both"], default="on" if not jobs_list else "both")
    p.add_argument("--cache-path", help="node cache file (created fresh)")
    p.add_argument("--preset", choices=["baseline", "hetero"], default="baseline",
                   help="backends available to the scheduler")
    p.add_argument("--remote", default="off", help="coordinator address, or 'off' for local evaluation")
    p.add_argument("--batch-requests", action="store_true", help="create remote tasks in one batch request")
    p.add_argument("--score-only", action=argparse.BooleanOptionalAction, default=True,
                   help="remote results carry the score only, not fitted blobs")
    p.add_argument("--pop-size", type=int, default=20, help="population size")
    p.add_argument("--max-generations", type=int, default=None)
    p.add_argument("--cv-folds", type=int, default=5)
    p.add_argument("--no-pipeline-limit", action="store_true",
                   help="disable the per-pipeline time limit (timeout/4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("pipevo-out"))


def _dataset_spec(args) -> bench.DatasetSpec:
    return bench.DatasetSpec(csv_path=args.dataset, label=args.label,
                             synth=None if args.dataset else (args.synth or args.default_synth),
                             rows=args.rows, features=args.features, noise=args.noise, seed=args.seed)


def _backends(preset: str) -> frozenset[Binding]:
    if preset == "hetero":
        return frozenset({Binding.BASELINE, Binding.ACCELERATED})
    return frozenset({Binding.BASELINE})


def _remote(args) -> str | None:
    return None if args.remote in (None, "", "off") else args.remote


def _experiment(args, **overrides) -> bench.ExperimentConfig:
    kwargs = dict(
        dataset=_dataset_spec(args), timeout_sec=args.timeout,
        n_jobs=args.n_jobs or [1, bench.default_jobs()], cache=args.cache, cache_path=args.cache_path,
        preset=args.preset, remote=_remote(args), batch_requests=args.batch_requests, score_only=args.score_only,
        population_size=args.pop_size, repetitions=args.reps, seed=args.seed, out_dir=args.out_dir,
        cv_folds=args.cv_folds, max_generations=args.max_generations,
        use_pipeline_limit=not args.no_pipeline_limit,
    )
    kwargs.update(overrides)
    return bench.ExperimentConfig(**kwargs)


# ------------------------------------------------------------------ commands

def cmd_optimize(args) -> int:
    if args.cache == "both":
        raise ValueError("optimize takes --cache on or off")
    spec = _dataset_spec(args)
    dataset = spec.load()
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cache = args.cache == "on"
    try:
        rec = bench.run_optimization(
            dataset, timeout_sec=args.timeout, n_jobs=args.n_jobs, cache=cache, seed=args.seed, out_dir=out,
            tag="optimize", population_size=args.pop_size, cv_folds=args.cv_folds,
            backends=_backends(args.preset), remote=_remote(args),
            batch_requests=args.batch_requests, score_only=args.score_only,
            cache_path=args.cache_path, max_generations=args.max_generations,
            use_pipeline_limit=not args.no_pipeline_limit)
    except EmptyPopulation as exc:
        partial = out / "runlog-optimize.jsonl"
        if partial.exists():
            partial.replace(out / "runlog.jsonl")
        print(f"no pipeline could be evaluated: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    (out / "runlog-optimize.jsonl").replace(out / "runlog.jsonl")
    best = rec["best"]
    (out / "best_pipeline.json").write_text(json.dumps(
        {"descriptor": best.descriptor, "fitness": best.fitness, "holdout_auc": rec["holdout_auc"],
         "graph": best.graph.to_dict()}, indent=2, sort_keys=True) + "\n")
    line = (f"best {best.descriptor} cv_auc={best.fitness:.4f} holdout_auc={rec['holdout_auc']:.4f} "
            f"pipelines={rec['evaluated_pipeline_count']} generations={rec['generations']} "
            f"cache_hits={rec['cache_hits']} cache_misses={rec['cache_misses']}")
    bench.write_report(out / "report.csv", [{"dataset": spec.describe(), "rep": 0, "seed": args.seed, **rec}],
                       ["dataset"], bench.RUN_METRICS)
    bench.write_series(out / "series_trajectory.csv", ["elapsed_sec", "best_fitness"], rec["trajectory"])
    bench.plots.trajectories(out / "trajectory.png", {"best": rec["trajectory"]}, args.timeout)
    bench.write_summary(out, [line])
    print(line)
    return 0


def cmd_bench_cache(args) -> int:
    bench.bench_cache(_experiment(args))
    print((args.out_dir / "summary.txt").read_text(), end="")
    return 0


def cmd_bench_parallel(args) -> int:
    modes = (True, False) if args.limit_modes == "both" else (args.limit_modes == "on",)
    bench.bench_parallel(_experiment(args, cache="on" if args.cache == "both" else args.cache), modes)
    print((args.out_dir / "summary.txt").read_text(), end="")
    return 0


def cmd_bench_hetero(args) -> int:
    cfg = bench.ExperimentConfig(dataset=bench.DatasetSpec(synth="blobs", features=args.features),
                                 repetitions=args.reps, out_dir=args.out_dir, seed=args.seed)
    bench.bench_hetero(cfg, args.sizes)
    print((args.out_dir / "summary.txt").read_text(), end="")
    return 0


def cmd_bench_remote(args) -> int:
    cfg = _experiment(args, population_sizes=args.pop_sizes, n_jobs=[1])
    bench.bench_remote(cfg, workers=args.workers, slots=args.slots)
    print((args.out_dir / "summary.txt").read_text(), end="")
    return 0


def cmd_verify(args) -> int:
    status = 0
    for path in args.reports:
        problems = bench.verify_report(path)
        if problems:
            status = 1
            print(f"{path}: {len(problems)} problem(s)")
            for p in problems:
                print(f"  {p}")
        else:
            print(f"{path}: ok")
    return status


def cmd_coordinator(args) -> int:
    from pipevo.remote.coordinator import Coordinator

    coord = Coordinator(args.db or ":memory:", args.host, args.port, args.heartbeat)
    print(f"listening {coord.address}", flush=True)
    coord.serve_forever()
    return 0


def cmd_worker(args) -> int:
    from pipevo.remote.worker import run_worker

    run_worker(args.coordinator, args.slots, args.cpu_fraction, args.heartbeat)
    return 0


def cmd_list_ops(args) -> int:
    from pipevo.operations import REGISTRY
    from pipevo.operations.registry import describe

    for desc in sorted(REGISTRY.list_operations(), key=lambda d: d.name):
        print(json.dumps(describe(desc), sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipevo", description="Evolutionary pipeline optimizer and benchmarks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="run one optimization")
    _add_dataset_flags(p)
    _add_run_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("bench-cache", help="cache on/off comparison")
    _add_dataset_flags(p, "blobs")
    _add_run_flags(p, jobs_list=True)
    p.add_argument("--reps", type=int, default=3)
    p.set_defaults(func=cmd_bench_cache)

    p = sub.add_parser("bench-parallel", help="n_jobs speedup and fitness trajectories")
    _add_dataset_flags(p, "blobs")
    _add_run_flags(p, jobs_list=True)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--limit-modes", choices=["on", "off", "both"], default="on",
                   help="per-pipeline limit setting(s) to run")
    p.set_defaults(func=cmd_bench_parallel)

    p = sub.add_parser("bench-hetero", help="simulated baseline vs accelerated fit times")
    p.add_argument("--features", type=int, default=10)
    p.add_argument("--sizes", type=_int_list, default=list(bench.HETERO_ROWS))
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("pipevo-out"))
    p.set_defaults(func=cmd_bench_hetero)

    p = sub.add_parser("bench-remote", help="remote evaluation timelines")
    _add_dataset_flags(p)
    _add_run_flags(p, jobs_list=True)
    p.add_argument("--reps", type=int, default=4)
    p.add_argument("--pop-sizes", type=_int_list, default=[50, 100, 200])
    p.add_argument("--workers", type=int, default=None, help=f"worker processes (default {bench.default_jobs()})")
    p.add_argument("--slots", type=int, default=2, help="task slots per worker")
    p.set_defaults(func=cmd_bench_remote)

    p = sub.add_parser("verify", help="recompute report aggregates")
    p.add_argument("reports", nargs="+", type=Path)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("coordinator", help="run a coordinator")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--db", help="task table file (default: in memory)")
    p.add_argument("--heartbeat", type=_positive_float, default=2.0, help="expected worker heartbeat interval")
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("worker", help="run a worker")
    p.add_argument("--coordinator", required=True, help="coordinator address")
    p.add_argument("--slots", type=int, default=1)
    p.add_argument("--cpu-fraction", type=float, default=None, help="override the per-task cpu_fraction")
    p.add_argument("--heartbeat", type=_positive_float, default=2.0)
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("list-ops", help="print the operation registry")
    p.set_defaults(func=cmd_list_ops)
    return parser


def _terminate(signum, frame):
    # turn SIGTERM into SystemExit so cleanup handlers (child reaping) run
    raise SystemExit(128 + signum)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    signal.signal(signal.SIGTERM, _terminate)
    try:
        return args.func(args)
    except (ValueError, OSError, ParseError, SingleClassDataset, TooFewRows) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyPopulation as exc:
        print(f"no pipeline could be evaluated: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except KeyboardInterrupt:
        return 130
    except PipevoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
