"""Experiment harness behind the ``bench-*`` subcommands.

Every benchmark writes ``report.csv`` (one ``run`` row per repetition plus
``mean``/``std`` rows per configuration), ``series_*.csv`` data for the
figures, the figures themselves as PNG files, and ``summary.txt``.
``verify_report`` recomputes the aggregate rows from the run rows.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
import subprocess
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

from pipevo import hetero, plots
from pipevo.cache import open_cache
from pipevo.data import Dataset, load_csv, synth_blobs, synth_moons
from pipevo.dispatcher import InfrastructureDescriptor, cpu_count
from pipevo.evolution import evolve, trajectory_time_to
from pipevo.graph import Binding
from pipevo.individual import OptimizerConfig
from pipevo.objective import Objective
from pipevo.variation import initial_population

log = logging.getLogger(__name__)


def default_jobs() -> int:
    return max(1, min(8, cpu_count()))


@dataclass
class DatasetSpec:
    """Either a CSV file or a synthetic generator with its parameters."""

    csv_path: str | None = None
    label: str = "label"
    synth: str | None = "moons"
    rows: int | None = None
    features: int = 10
    noise: float = 0.1
    seed: int = 0

    def load(self) -> Dataset:
        if self.csv_path:
            return load_csv(self.csv_path, self.label)
        if self.synth == "moons":
            return synth_moons(self.rows or 1000, self.noise, self.seed)
        if self.synth == "blobs":
            return synth_blobs(self.rows or 100_000, self.features, self.seed)
        raise ValueError(f"unknown synthetic dataset {self.synth!r}")

    def describe(self) -> str:
        if self.csv_path:
            return f"csv:{self.csv_path}"
        return f"{self.synth}:{self.rows or ('1000' if self.synth == 'moons' else '100000')}"


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    timeout_sec: float = 60.0
    n_jobs: list[int] = field(default_factory=lambda: [1, default_jobs()])
    cache: str = "both"  # on | off | both
    cache_path: str | None = None
    preset: str = "baseline"  # baseline | hetero
    remote: str | None = None
    batch_requests: bool = False
    score_only: bool = True
    population_size: int = 20
    population_sizes: list[int] = field(default_factory=lambda: [50, 100, 200])
    repetitions: int = 3
    seed: int = 0
    out_dir: Path = Path("bench-out")
    cv_folds: int = 5
    max_generations: int | None = None
    use_pipeline_limit: bool = True

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.cache not in ("on", "off", "both"):
            raise ValueError("cache must be on, off or both")
        if self.preset not in ("baseline", "hetero"):
            raise ValueError("preset must be baseline or hetero")
        if not self.n_jobs or any(j < 1 for j in self.n_jobs):
            raise ValueError("n_jobs values must be positive")

    @property
    def cache_modes(self) -> list[bool]:
        return {"on": [True], "off": [False], "both": [True, False]}[self.cache]

    @property
    def backends(self) -> frozenset[Binding]:
        if self.preset == "hetero":
            return frozenset({Binding.BASELINE, Binding.ACCELERATED})
        return frozenset({Binding.BASELINE})

    def to_doc(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["out_dir"] = str(self.out_dir)
        return doc


# ------------------------------------------------------------------ reports

def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def _std(values: Sequence[float]) -> float:
    return statistics.pstdev(values) if len(values) > 1 else 0.0


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def aggregate_rows(runs: Sequence[dict[str, Any]], group_keys: Sequence[str],
                   metric_keys: Sequence[str]) -> list[dict[str, Any]]:
    groups: dict[tuple, list[dict[str, Any]]] = {}
    for r in runs:
        groups.setdefault(tuple(_fmt(r[k]) for k in group_keys), []).append(r)
    out = []
    for key, members in groups.items():
        for row_type, fn in (("mean", _mean), ("std", _std)):
            row: dict[str, Any] = {"row_type": row_type, **dict(zip(group_keys, key))}
            for m in metric_keys:
                values = [float(x[m]) for x in members if x.get(m) not in (None, "")]
                row[m] = fn(values) if values else None
            row["rep"] = row["seed"] = None
            out.append(row)
    return out


def write_report(path: Path, runs: Sequence[dict[str, Any]], group_keys: Sequence[str],
                 metric_keys: Sequence[str]) -> list[dict[str, Any]]:
    header = ["row_type", *group_keys, "rep", "seed", *metric_keys]
    # round-trip through the text form so aggregates match what a reader recomputes
    runs = [{k: _parse(_fmt(r.get(k))) for k in header if k != "row_type"} for r in runs]
    aggregates = aggregate_rows(runs, group_keys, metric_keys)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in runs:
            w.writerow(["run", *(_fmt(r.get(k)) for k in header[1:])])
        for r in aggregates:
            w.writerow([_fmt(r.get(k)) for k in header])
    return aggregates


def _parse(text: str) -> Any:
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_report(path: Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def verify_report(path: str | Path) -> list[str]:
    """Problems found when recomputing aggregate rows; empty means consistent."""
    header, rows = read_report(Path(path))
    if not header or header[0] != "row_type" or "rep" not in header or "seed" not in header:
        return [f"{path}: not a report (missing row_type/rep/seed columns)"]
    group_keys = header[1:header.index("rep")]
    metric_keys = header[header.index("seed") + 1:]
    runs = [r for r in rows if r["row_type"] == "run"]
    if not runs:
        return [f"{path}: no run rows"]
    expected = {(e["row_type"], tuple(_fmt(e[k]) for k in group_keys)): e
                for e in aggregate_rows([{k: _parse(v) for k, v in r.items()} for r in runs], group_keys, metric_keys)}
    problems = []
    seen = set()
    for r in rows:
        if r["row_type"] == "run":
            continue
        key = (r["row_type"], tuple(r[k] for k in group_keys))
        seen.add(key)
        exp = expected.get(key)
        if exp is None:
            problems.append(f"aggregate row {key} has no run rows")
            continue
        for m in metric_keys:
            want, got = exp[m], _parse(r[m])
            if want is None and got is None:
                continue
            if want is None or got is None or float(got) != float(want):
                problems.append(f"{key} {m}: reported {r[m]!r}, recomputed {_fmt(want)!r}")
    for key in expected.keys() - seen:
        problems.append(f"missing aggregate row {key}")
    return problems


def write_series(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_summary(out_dir: Path, lines: Sequence[str], config: ExperimentConfig | None = None) -> None:
    text = "\n".join(lines) + "\n"
    (out_dir / "summary.txt").write_text(text, encoding="utf-8")
    if config is not None:
        (out_dir / "config.json").write_text(json.dumps(config.to_doc(), indent=2, sort_keys=True, default=str))


# -------------------------------------------------------------- optimization

def run_optimization(dataset: Dataset, *, timeout_sec: float, n_jobs: int, cache: bool, seed: int,
                     out_dir: Path, tag: str, population_size: int = 20, cv_folds: int = 5,
                     backends: frozenset[Binding] = frozenset({Binding.BASELINE}), remote: str | None = None,
                     batch_requests: bool = False, score_only: bool = True, cache_path: str | None = None,
                     max_generations: int | None = None, use_pipeline_limit: bool = True) -> dict[str, Any]:
    """One evolve() run; returns its report record (raises EmptyPopulation)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    config = OptimizerConfig(population_size=population_size, timeout_sec=timeout_sec, n_jobs=n_jobs,
                             cv_folds=cv_folds, seed=seed, max_generations=max_generations,
                             use_pipeline_limit=use_pipeline_limit)
    objective = Objective(dataset, seed=seed, folds=cv_folds)
    infra = InfrastructureDescriptor(mode="remote" if remote else "local", n_jobs=n_jobs, backends=backends,
                                     remote_endpoint=remote, remote_batch=batch_requests, score_only=score_only)
    handle = open_cache(cache_path or out_dir / f"cache-{tag}.sqlite", "create") if cache else None
    try:
        best, runlog = evolve(config, objective, handle, infrastructure=infra,
                              runlog_path=out_dir / f"runlog-{tag}.jsonl")
        holdout, _ = objective.holdout(best.graph, handle)
    finally:
        if handle is not None:
            handle.close()
    stats = runlog.cache_stats
    return {
        "evaluated_pipeline_count": runlog.evaluated_count,
        "best_cv_auc": best.fitness,
        "holdout_auc": holdout,
        "generations": len(runlog.generations),
        "elapsed_sec": runlog.elapsed_sec,
        "cache_hits": stats.hits,
        "cache_misses": stats.misses,
        "cache_inserts": stats.inserts,
        "deleted": runlog.status_counts()["deleted_invalid"] + runlog.status_counts()["deleted_timeout"],
        "skipped": runlog.status_counts()["skipped_no_time"],
        "best_descriptor": best.descriptor,
        "trajectory": runlog.trajectory,
        "generation_times": runlog.generation_times,
        "stage_timings": runlog.stage_timings,
        "best": best,
        "runlog": runlog,
    }


RUN_METRICS = ["evaluated_pipeline_count", "best_cv_auc", "holdout_auc", "generations", "elapsed_sec",
               "cache_hits", "cache_misses", "deleted", "skipped"]


def bench_cache(cfg: ExperimentConfig) -> list[dict[str, Any]]:
    """Cache on/off x n_jobs x repetitions, matched seeds and timeout."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    dataset = cfg.dataset.load()
    runs = []
    for rep in range(cfg.repetitions):
        seed = cfg.seed + rep
        for n_jobs in cfg.n_jobs:
            for cache in cfg.cache_modes:
                tag = f"cache-{'on' if cache else 'off'}-j{n_jobs}-r{rep}"
                rec = run_optimization(dataset, timeout_sec=cfg.timeout_sec, n_jobs=n_jobs, cache=cache, seed=seed,
                                       out_dir=cfg.out_dir / "runs", tag=tag, population_size=cfg.population_size,
                                       cv_folds=cfg.cv_folds, backends=cfg.backends, remote=cfg.remote,
                                       batch_requests=cfg.batch_requests, score_only=cfg.score_only,
                                       max_generations=cfg.max_generations,
                                       use_pipeline_limit=cfg.use_pipeline_limit)
                log.info("%s: %d pipelines, cv %.4f, holdout %.4f", tag, rec["evaluated_pipeline_count"],
                         rec["best_cv_auc"], rec["holdout_auc"])
                runs.append({"cache": "on" if cache else "off", "n_jobs": n_jobs, "rep": rep, "seed": seed, **rec})
    aggregates = write_report(cfg.out_dir / "report.csv", runs, ["cache", "n_jobs"], RUN_METRICS)
    means = [a for a in aggregates if a["row_type"] == "mean"]
    plots.bar_chart(cfg.out_dir / "pipelines.png", [f"cache {a['cache']}, {a['n_jobs']} jobs" for a in means],
                    [a["evaluated_pipeline_count"] for a in means], "evaluated pipelines (mean)",
                    f"{cfg.dataset.describe()}, {cfg.timeout_sec:g} s")
    lines = [f"bench-cache on {cfg.dataset.describe()}, timeout {cfg.timeout_sec:g} s, {cfg.repetitions} reps",
             f"{'cache':>6} {'jobs':>5} {'pipelines':>10} {'cv AUC':>8} {'holdout AUC':>12} {'hits':>8}"]
    for a in means:
        lines.append(f"{a['cache']:>6} {a['n_jobs']:>5} {a['evaluated_pipeline_count']:>10.1f} "
                     f"{a['best_cv_auc']:>8.4f} {a['holdout_auc']:>12.4f} {a['cache_hits']:>8.1f}")
    write_summary(cfg.out_dir, lines, cfg)
    return runs


def bench_parallel(cfg: ExperimentConfig, limit_modes: Sequence[bool] = (True,)) -> list[dict[str, Any]]:
    """n_jobs sweep with best-fitness trajectories; optionally limit on/off."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    dataset = cfg.dataset.load()
    cache = cfg.cache_modes[0]
    runs, series = [], []
    for rep in range(cfg.repetitions):
        seed = cfg.seed + rep
        for limit in limit_modes:
            for n_jobs in cfg.n_jobs:
                tag = f"par-j{n_jobs}-{'limit' if limit else 'nolimit'}-r{rep}"
                rec = run_optimization(dataset, timeout_sec=cfg.timeout_sec, n_jobs=n_jobs, cache=cache, seed=seed,
                                       out_dir=cfg.out_dir / "runs", tag=tag, population_size=cfg.population_size,
                                       cv_folds=cfg.cv_folds, backends=cfg.backends, remote=cfg.remote,
                                       batch_requests=cfg.batch_requests, score_only=cfg.score_only,
                                       max_generations=cfg.max_generations, use_pipeline_limit=limit)
                log.info("%s: %d pipelines, cv %.4f", tag, rec["evaluated_pipeline_count"], rec["best_cv_auc"])
                runs.append({"n_jobs": n_jobs, "pipeline_limit": "on" if limit else "off", "rep": rep, "seed": seed,
                             **rec})
                series.extend((n_jobs, "on" if limit else "off", rep, t, f) for t, f in rec["trajectory"])
    # time at which each run reaches the single-job final fitness of the same rep
    for r in runs:
        ref = next((x for x in runs if x["rep"] == r["rep"] and x["n_jobs"] == min(cfg.n_jobs)
                    and x["pipeline_limit"] == r["pipeline_limit"]), None)
        r["time_to_reference_sec"] = trajectory_time_to(r["runlog"], ref["best_cv_auc"]) if ref else None
    metrics = [*RUN_METRICS, "time_to_reference_sec"]
    aggregates = write_report(cfg.out_dir / "report.csv", runs, ["n_jobs", "pipeline_limit"], metrics)
    write_series(cfg.out_dir / "series_trajectory.csv", ["n_jobs", "pipeline_limit", "rep", "elapsed_sec",
                                                         "best_fitness"], series)
    plots.trajectories(cfg.out_dir / "trajectory.png",
                       {f"{r['n_jobs']} jobs, limit {r['pipeline_limit']}, rep {r['rep']}": r["trajectory"]
                        for r in runs}, cfg.timeout_sec)
    means = [a for a in aggregates if a["row_type"] == "mean"]
    lines = [f"bench-parallel on {cfg.dataset.describe()}, timeout {cfg.timeout_sec:g} s, {cfg.repetitions} reps, "
             f"{cpu_count()} cpus",
             f"{'jobs':>5} {'limit':>6} {'pipelines':>10} {'cv AUC':>8} {'t_ref (s)':>10}"]
    for a in means:
        t_ref = a["time_to_reference_sec"]
        lines.append(f"{a['n_jobs']:>5} {a['pipeline_limit']:>6} {a['evaluated_pipeline_count']:>10.1f} "
                     f"{a['best_cv_auc']:>8.4f} {'' if t_ref is None else f'{t_ref:.2f}':>10}")
    write_summary(cfg.out_dir, lines, cfg)
    return runs


HETERO_ROWS = (10_000, 100_000, 200_000, 300_000)


def hetero_table(rows_list: Sequence[int] = HETERO_ROWS, features: int = 10, repetitions: int = 3,
                 ) -> list[dict[str, Any]]:
    """Simulated times of the single-model and composite pipelines per size."""
    runs = []
    pipelines = {"single": hetero.single_model_pipeline(), "composite": hetero.composite_pipeline()}
    for rep in range(repetitions):
        for rows in rows_list:
            for name, graph in pipelines.items():
                t = {mode: hetero.simulate_fit_time(hetero.bind(graph, mode, rows, features), rows, features).total
                     for mode in hetero.MODES}
                runs.append({
                    "pipeline": name, "rows": rows, "rep": rep, "seed": rep,
                    "t_baseline": t["baseline"], "t_hetero": t["hetero"], "t_scheduled": t["scheduled"],
                    "improvement_pct": hetero.improvement_pct(t["baseline"], t["hetero"]),
                    "improvement_scheduled_pct": hetero.improvement_pct(t["baseline"], t["scheduled"]),
                })
    return runs


def bench_hetero(cfg: ExperimentConfig, rows_list: Sequence[int] = HETERO_ROWS) -> list[dict[str, Any]]:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    runs = hetero_table(rows_list, cfg.dataset.features, cfg.repetitions)
    metrics = ["t_baseline", "t_hetero", "t_scheduled", "improvement_pct", "improvement_scheduled_pct"]
    aggregates = write_report(cfg.out_dir / "report.csv", runs, ["pipeline", "rows"], metrics)
    means = [a for a in aggregates if a["row_type"] == "mean"]
    table = [(a["rows"], a["pipeline"], a["t_baseline"], a["t_hetero"], a["t_scheduled"],
              hetero.format_improvement(a["improvement_pct"]),
              hetero.format_improvement(a["improvement_scheduled_pct"])) for a in means]
    write_series(cfg.out_dir / "series_hetero.csv", ["rows", "pipeline", "t_baseline", "t_hetero", "t_scheduled",
                                                     "improvement", "improvement_scheduled"], table)
    sizes = [str(r) for r in rows_list]
    plots.grouped_bars(cfg.out_dir / "hetero.png", sizes,
                       {p: [max(0.0, a["improvement_pct"]) for a in means if a["pipeline"] == p]
                        for p in ("single", "composite")},
                       "improvement (%)", "simulated accelerated vs baseline")
    lines = ["bench-hetero (simulated fit times, seconds)",
             f"{'rows':>8} {'pipeline':>10} {'baseline':>9} {'hetero':>9} {'sched':>9} {'impr %':>7} {'sched %':>8}"]
    for rows, name, tb, th, ts, imp, imps in table:
        lines.append(f"{rows:>8} {name:>10} {tb:>9.3f} {th:>9.3f} {ts:>9.3f} {imp:>7} {imps:>8}")
    write_summary(cfg.out_dir, lines, cfg)
    return runs


# ------------------------------------------------------------------- remote

@contextmanager
def local_cluster(workers: int, slots: int = 2, heartbeat_interval: float = 2.0,
                  db_path: str | Path | None = None) -> Iterator[str]:
    """A coordinator and ``workers`` worker processes; yields the address.

    Child processes are terminated and reaped on exit.
    """
    base = [sys.executable, "-m", "pipevo.cli"]
    env = {**os.environ, "PYTHONUNBUFFERED": "1"}
    coord_cmd = [*base, "coordinator", "--port", "0", "--heartbeat", str(heartbeat_interval)]
    if db_path is not None:
        coord_cmd += ["--db", str(db_path)]
    procs: list[subprocess.Popen] = []
    try:
        coord = subprocess.Popen(coord_cmd, stdout=subprocess.PIPE, text=True, env=env)
        procs.append(coord)
        line = coord.stdout.readline().strip()
        if not line.startswith("listening "):
            raise RuntimeError(f"coordinator failed to start: {line!r}")
        address = line.split(" ", 1)[1]
        for _ in range(workers):
            procs.append(subprocess.Popen([*base, "worker", "--coordinator", address, "--slots", str(slots),
                                           "--heartbeat", str(heartbeat_interval)], env=env,
                                          stdout=subprocess.DEVNULL))
        yield address
    finally:
        # workers first, so they do not see the coordinator vanish mid-request
        for p in reversed(procs):
            if p.poll() is None:
                p.terminate()
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
            if p.stdout is not None:
                p.stdout.close()


REMOTE_MODES = (("fast", "serial"), ("fast", "batch"), ("throttled", "serial"))
THROTTLED_FRACTION = 0.2


def linear_reference(xs: Sequence[float], ys: Sequence[float]) -> list[float]:
    """Least-squares line through the origin."""
    slope = math.fsum(x * y for x, y in zip(xs, ys)) / math.fsum(x * x for x in xs)
    return [slope * x for x in xs]


def remote_population_run(client, dataset_ref: str, population: int, seed: int, mode: str, request_mode: str,
                          cv_folds: int = 5, score_only: bool = True, fetch_workers: int = 8) -> dict[str, Any]:
    graphs = [i.graph for i in initial_population(OptimizerConfig(population_size=population, seed=seed)).individuals]
    fraction = THROTTLED_FRACTION if mode == "throttled" else 1.0
    t0 = time.perf_counter()
    timelines = client.evaluate_population(graphs, dataset_ref, seed=seed, cv_folds=cv_folds,
                                           batch=request_mode == "batch", score_only=score_only,
                                           cpu_fraction=fraction, fetch_workers=fetch_workers)
    total = time.perf_counter() - t0
    # one round trip in batch mode; the sum of round trips in serial mode
    request_wall = timelines[0].request if request_mode == "batch" and timelines else \
        math.fsum(t.request for t in timelines)
    return {
        "total_sec": total,
        "request_wall_sec": request_wall,
        "queued_sum": math.fsum(t.queued for t in timelines),
        "compute_sum": math.fsum(t.compute for t in timelines),
        "fetch_sum": math.fsum(t.fetch for t in timelines),
        "max_identity_gap": max(abs(t.end_to_end - t.stage_sum) for t in timelines),
        "completed": sum(t.status == "completed" for t in timelines),
        "timelines": timelines,
    }


def bench_remote(cfg: ExperimentConfig, workers: int | None = None, slots: int = 2,
                 modes: Sequence[tuple[str, str]] = REMOTE_MODES) -> list[dict[str, Any]]:
    from pipevo.remote.client import RemoteClient

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    dataset = cfg.dataset.load()
    workers = workers or default_jobs()
    runs, task_rows = [], []
    with local_cluster(workers, slots) if not cfg.remote else _existing(cfg.remote) as address:
        with RemoteClient(address) as client:
            ref = client.register_dataset(dataset)
            # warm-up: workers load the dataset and imports before anything is timed
            remote_population_run(client, ref, workers * slots, cfg.seed, "fast", "batch", cfg.cv_folds)
            for rep in range(cfg.repetitions):
                seed = cfg.seed + rep
                for mode, request_mode in modes:
                    for pop in cfg.population_sizes:
                        rec = remote_population_run(client, ref, pop, seed, mode, request_mode, cfg.cv_folds,
                                                    cfg.score_only)
                        log.info("remote %s/%s pop %d rep %d: %.2f s", mode, request_mode, pop, rep, rec["total_sec"])
                        for tl in rec.pop("timelines"):
                            task_rows.append((mode, request_mode, pop, rep, tl.task_id, tl.status, tl.request,
                                              tl.queued, tl.compute, tl.fetch, tl.end_to_end))
                        runs.append({"mode": mode, "request_mode": request_mode, "population": pop, "rep": rep,
                                     "seed": seed, **rec})
    metrics = ["total_sec", "request_wall_sec", "queued_sum", "compute_sum", "fetch_sum", "max_identity_gap",
               "completed"]
    aggregates = write_report(cfg.out_dir / "report.csv", runs, ["mode", "request_mode", "population"], metrics)
    write_series(cfg.out_dir / "series_tasks.csv", ["mode", "request_mode", "population", "rep", "task_id", "status",
                                                    "request", "queued", "compute", "fetch", "end_to_end"], task_rows)
    means = [a for a in aggregates if a["row_type"] == "mean"]
    totals, refs, total_rows = {}, {}, []
    for mode, request_mode in modes:
        label = f"{mode}/{request_mode}"
        pts = [a for a in means if a["mode"] == mode and a["request_mode"] == request_mode]
        xs = [float(a["population"]) for a in pts]
        ys = [a["total_sec"] for a in pts]
        totals[label], refs[label] = ys, linear_reference(xs, ys)
        total_rows += [(mode, request_mode, int(x), y, r) for x, y, r in zip(xs, ys, refs[label])]
    write_series(cfg.out_dir / "series_totals.csv", ["mode", "request_mode", "population", "mean_total_sec",
                                                     "linear_reference_sec"], total_rows)
    plots.lines_with_reference(cfg.out_dir / "remote_totals.png", [float(p) for p in cfg.population_sizes], totals,
                               refs, "population size", "total time (s)")
    stage_labels = [f"{a['mode']}/{a['request_mode']}/{a['population']}" for a in means]
    plots.stacked_stages(cfg.out_dir / "remote_stages.png", stage_labels,
                         {"request": [a["request_wall_sec"] for a in means],
                          "compute": [a["compute_sum"] for a in means],
                          "fetch": [a["fetch_sum"] for a in means]}, "stage time per population")
    lines = [f"bench-remote on {cfg.dataset.describe()}, {workers} workers x {slots} slots, {cfg.repetitions} reps",
             f"{'mode':>10} {'requests':>9} {'pop':>5} {'total':>8} {'request':>8} {'compute':>8} {'fetch':>8}"]
    for a in means:
        lines.append(f"{a['mode']:>10} {a['request_mode']:>9} {a['population']:>5} {a['total_sec']:>8.2f} "
                     f"{a['request_wall_sec']:>8.3f} {a['compute_sum']:>8.2f} {a['fetch_sum']:>8.2f}")
    write_summary(cfg.out_dir, lines, cfg)
    return runs


@contextmanager
def _existing(address: str) -> Iterator[str]:
    yield address
