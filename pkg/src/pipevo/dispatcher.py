"""Budgeted, cache-aware, parallel evaluation of one generation.

The local branch binds backends, fits through the node cache and scores
the pipeline; the remote branch hands graphs to a coordinator and collects
fitness from the fetched result archives. Individuals that fail, overrun
their per-pipeline limit or cannot start within the budget are dropped.
"""

from __future__ import annotations

import logging
import math
import multiprocessing as mp
import os
import time
from fractions import Fraction
from concurrent.futures import FIRST_COMPLETED, Executor, Future, ProcessPoolExecutor, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from pipevo.cache import CacheHandle, CacheKey, CacheMode, CacheStats, ordered_predecessors
from pipevo.deadline import check_deadline, deadline_scope
from pipevo.errors import EvaluationTimeout, InfrastructureUnavailable, RemoteError
from pipevo.graph import Binding, PipelineGraph, topological_order
from pipevo.individual import Individual, OptimizationTimer
from pipevo.objective import Objective
from pipevo.operations import REGISTRY, OperationRegistry

log = logging.getLogger(__name__)

STAGES = ("prepare", "cache_load", "fit", "cache_save", "request", "wait", "fetch")
EXACT_MAKESPAN_LIMIT = 12


class Status(str, Enum):
    EVALUATED = "evaluated"
    DELETED_INVALID = "deleted_invalid"
    DELETED_TIMEOUT = "deleted_timeout"
    SKIPPED_NO_TIME = "skipped_no_time"


@dataclass
class InfrastructureDescriptor:
    mode: str = "local"  # local | remote
    n_jobs: int = 1
    backends: frozenset[Binding] = frozenset({Binding.BASELINE})
    remote_endpoint: str | None = None
    remote_batch: bool = False
    score_only: bool = True
    executor: str = "process"  # process | thread, used when n_jobs > 1

    def __post_init__(self):
        self.backends = frozenset(Binding(b) for b in self.backends)
        if self.mode not in ("local", "remote"):
            raise ValueError(f"unknown infrastructure mode {self.mode!r}")
        if self.mode == "remote" and not self.remote_endpoint:
            raise ValueError("remote mode needs remote_endpoint")

    @property
    def is_remote(self) -> bool:
        return self.mode == "remote"


@dataclass
class EvaluationOutcome:
    individual_id: str
    status: Status
    fitness: float | None = None
    timings: dict[str, float] = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    eval_time_sec: float = 0.0
    cache_stats: CacheStats = field(default_factory=CacheStats)
    reason: str | None = None
    fold_scores: list[float] | None = None

    def __post_init__(self):
        self.status = Status(self.status)
        if (self.status is Status.EVALUATED) != (self.fitness is not None):
            raise ValueError("fitness must be present exactly when status is evaluated")


# --------------------------------------------------------------- cost model

def _node_inputs(graph: PipelineGraph, cols: int, n_classes: int, registry: OperationRegistry) -> dict[str, int]:
    """Input width of every node given the dataset width."""
    width_in: dict[str, int] = {}
    width_out: dict[str, int] = {}
    for nid in topological_order(graph):
        preds = graph[nid].predecessors
        width_in[nid] = cols if not preds else sum(width_out[p] for p in preds)
        width_out[nid] = registry.output_width(graph[nid].spec, width_in[nid], n_classes)
    return width_in


def _best_backend(spec, available: Iterable[Binding], rows: int, cols: int, registry: OperationRegistry):
    options = sorted(set(available) & registry.get(spec.name).backends, key=lambda b: b is not Binding.BASELINE)
    if not options:
        options = [Binding.BASELINE]
    # baseline listed first so it wins ties
    return min(options, key=lambda b: registry.estimate_fit_time(spec, b, rows, cols))


def assign_backends(graph: PipelineGraph, infrastructure: InfrastructureDescriptor | Iterable[Binding],
                    dataset_shape: tuple[int, int], n_classes: int = 2,
                    registry: OperationRegistry = REGISTRY) -> PipelineGraph:
    """Bind each node to the available backend with the smallest fit estimate."""
    available = infrastructure.backends if isinstance(infrastructure, InfrastructureDescriptor) else \
        frozenset(Binding(b) for b in infrastructure)
    rows, cols = dataset_shape
    widths = _node_inputs(graph, cols, n_classes, registry)
    return graph.with_bindings({
        nid: _best_backend(graph[nid].spec, available, rows, widths[nid], registry) for nid in graph.nodes
    })


def individual_time_estimate(graph: PipelineGraph, available: Iterable[Binding], dataset_shape: tuple[int, int],
                             cached: set[CacheKey] = frozenset(), fold_ids: Sequence[int] = range(5),
                             n_classes: int = 2, registry: OperationRegistry = REGISTRY) -> float:
    """Sum over nodes and folds of the cheapest fit estimate; cached nodes cost 0."""
    rows, cols = dataset_shape
    widths = _node_inputs(graph, cols, n_classes, registry)
    terms = []
    for nid in sorted(graph.nodes):
        spec = graph[nid].spec
        cost = registry.estimate_fit_time(spec, _best_backend(spec, available, rows, widths[nid], registry),
                                          rows, widths[nid])
        descriptor = graph.descriptor(nid)
        terms.extend(0.0 if CacheKey(f, descriptor) in cached else cost for f in fold_ids)
    return math.fsum(terms)


def _to_ints(times: Sequence[float]) -> tuple[list[int], int]:
    """Scale binary floats to exact integers sharing one power-of-two unit."""
    ratios = [t.as_integer_ratio() for t in times]
    denom = max((d for _, d in ratios), default=1)
    return [n * (denom // d) for n, d in ratios], denom


def makespan(times: Sequence[float], workers: int) -> float:
    """Completion time of the busiest worker under the best assignment.

    Exact (branch and bound in integer arithmetic) up to
    ``EXACT_MAKESPAN_LIMIT`` jobs, longest-processing-time greedy beyond.
    """
    times = [float(t) for t in times]
    if not times:
        return 0.0
    if any(t < 0 for t in times):
        raise ValueError("job times must be non-negative")
    workers = max(1, min(workers, len(times)))
    ints, denom = _to_ints(times)
    jobs = sorted(ints, reverse=True)

    loads = [0] * workers
    for j in jobs:
        loads[loads.index(min(loads))] += j
    best = max(loads)

    if len(jobs) <= EXACT_MAKESPAN_LIMIT and workers > 1:
        lower = max(jobs[0], -(-sum(jobs) // workers))
        loads = [0] * workers

        def search(i: int) -> None:
            nonlocal best
            if best == lower:
                return
            if i == len(jobs):
                best = min(best, max(loads))
                return
            tried = set()
            for w in range(workers):
                if loads[w] in tried or loads[w] + jobs[i] >= best:
                    continue
                tried.add(loads[w])
                loads[w] += jobs[i]
                search(i + 1)
                loads[w] -= jobs[i]

        search(0)
    return float(Fraction(best, denom))


def estimate_generation_time(population: Sequence[Individual | PipelineGraph],
                             infrastructure: InfrastructureDescriptor,
                             handle: CacheHandle | None, dataset_shape: tuple[int, int],
                             fold_ids: Sequence[int] = range(5), n_classes: int = 2,
                             registry: OperationRegistry = REGISTRY) -> float:
    """Predicted wall time of one generation on ``infrastructure.n_jobs`` workers."""
    graphs = [p.graph if isinstance(p, Individual) else p for p in population]
    cached: set[CacheKey] = set()
    if handle is not None:
        keys = [CacheKey(f, g.descriptor(nid)) for g in graphs for nid in g.nodes for f in fold_ids]
        cached = handle.contains_many(keys)
    times = [individual_time_estimate(g, infrastructure.backends, dataset_shape, cached, fold_ids, n_classes, registry)
             for g in graphs]
    return makespan(times, infrastructure.n_jobs)


# -------------------------------------------------------------- local path

_WORKER: dict = {}


def _init_worker(objective: Objective, cache_path: str | None, backends: frozenset[Binding]) -> None:
    _WORKER["objective"] = objective
    _WORKER["handle"] = CacheHandle(cache_path, CacheMode.OPEN_EXISTING) if cache_path else None
    _WORKER["backends"] = backends


def evaluate_local(ind_id: str, graph: PipelineGraph, objective: Objective, handle: CacheHandle | None,
                   backends: frozenset[Binding], limit: float | None) -> EvaluationOutcome:
    start = time.monotonic()
    deadline = None if limit is None else start + limit
    timings = dict.fromkeys(STAGES, 0.0)
    try:
        with deadline_scope(deadline):
            t0 = time.perf_counter()
            rows = objective.fold_rows
            bound = assign_backends(graph, backends, (rows, objective.dataset.X.shape[1]),
                                    objective.dataset.n_classes, objective.registry)
            timings["prepare"] = time.perf_counter() - t0
            result = objective(bound, handle, check_deadline)
    except EvaluationTimeout as exc:
        return EvaluationOutcome(ind_id, Status.DELETED_TIMEOUT, timings=timings,
                                 eval_time_sec=time.monotonic() - start, reason=str(exc))
    except Exception as exc:  # noqa: BLE001 - any failure invalidates the individual
        return EvaluationOutcome(ind_id, Status.DELETED_INVALID, timings=timings,
                                 eval_time_sec=time.monotonic() - start, reason=f"{type(exc).__name__}: {exc}")
    elapsed = time.monotonic() - start
    for k in ("cache_load", "fit", "cache_save"):
        timings[k] = result.timings.get(k, 0.0)
    if limit is not None and elapsed > limit:
        # finished, but too late: the watchdog discards it
        return EvaluationOutcome(ind_id, Status.DELETED_TIMEOUT, timings=timings, eval_time_sec=elapsed,
                                 cache_stats=result.stats, reason=f"took {elapsed:.3f}s > limit {limit:.3f}s")
    return EvaluationOutcome(ind_id, Status.EVALUATED, result.fitness, timings, elapsed, result.stats,
                             fold_scores=result.fold_scores)


def _evaluate_in_worker(ind_id: str, graph_doc: dict, limit: float | None) -> EvaluationOutcome:
    return evaluate_local(ind_id, PipelineGraph.from_dict(graph_doc), _WORKER["objective"], _WORKER["handle"],
                          _WORKER["backends"], limit)


def _pool_context():
    methods = mp.get_all_start_methods()
    return mp.get_context("forkserver" if "forkserver" in methods else "spawn")


class Dispatcher:
    """Evaluates populations on a fixed pool of ``n_jobs`` workers.

    Keep one dispatcher per optimization run so the worker pool survives
    across generations; use it as a context manager or call :meth:`close`.
    """

    def __init__(self, objective: Objective, infrastructure: InfrastructureDescriptor | None = None,
                 handle: CacheHandle | None = None, watchdog_grace: float = 0.5):
        self.objective = objective
        self.infrastructure = infrastructure or InfrastructureDescriptor()
        self.handle = handle
        self.watchdog_grace = watchdog_grace
        self.events: list[str] = []
        self._pool: Executor | None = None
        self._remote = None
        self._remote_dataset: str | None = None

    # -- lifecycle
    def _executor(self) -> Executor | None:
        infra = self.infrastructure
        if infra.n_jobs <= 1:
            return None
        if self._pool is None:
            if infra.executor == "thread":
                self._pool = ThreadPoolExecutor(max_workers=infra.n_jobs, thread_name_prefix="eval")
            else:
                path = str(self.handle.path) if self.handle is not None else None
                self._pool = ProcessPoolExecutor(
                    max_workers=infra.n_jobs, mp_context=_pool_context(), initializer=_init_worker,
                    initargs=(self.objective, path, infra.backends))
        return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True, cancel_futures=True)
            self._pool = None
        if self._remote is not None:
            self._remote.close()
            self._remote = None

    def __enter__(self) -> Dispatcher:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- evaluation
    def process_population(self, inds: Sequence[Individual], timer: OptimizationTimer
                           ) -> tuple[list[Individual], list[EvaluationOutcome]]:
        """Evaluate ``inds`` within the timer's budget.

        Returns the surviving (evaluated) individuals, with fitness set, and
        one outcome per input individual in input order.
        """
        if not inds:
            return [], []
        if self.infrastructure.is_remote:
            try:
                outcomes = self._process_remote(inds, timer)
            except InfrastructureUnavailable as exc:
                msg = f"remote endpoint unavailable ({exc}); falling back to local evaluation"
                log.warning(msg)
                self.events.append(msg)
                outcomes = self._process_local(inds, timer)
        else:
            outcomes = self._process_local(inds, timer)
        by_id = {o.individual_id: o for o in outcomes}
        survivors = []
        for ind in inds:
            out = by_id[ind.id]
            ind.eval_time_sec = out.eval_time_sec
            if out.status is Status.EVALUATED:
                ind.fitness = out.fitness
                ind.valid = True
                survivors.append(ind)
            else:
                ind.fitness = None
                ind.valid = False
        return survivors, [by_id[ind.id] for ind in inds]

    def _process_local(self, inds: Sequence[Individual], timer: OptimizationTimer) -> list[EvaluationOutcome]:
        limit = timer.per_pipeline_limit_sec
        pool = self._executor()
        backends = self.infrastructure.backends
        outcomes: list[EvaluationOutcome] = []
        if pool is None:
            for ind in inds:
                if not timer.enough_time():
                    outcomes.append(EvaluationOutcome(ind.id, Status.SKIPPED_NO_TIME, reason="not enough time"))
                    continue
                outcomes.append(evaluate_local(ind.id, ind.graph, self.objective, self.handle, backends, limit))
            return outcomes

        pending = list(inds)
        running: dict[Future, tuple[str, float]] = {}
        abandoned: set[Future] = set()
        while pending or running:
            while pending and len(running) < self.infrastructure.n_jobs:
                ind = pending.pop(0)
                if not timer.enough_time():
                    outcomes.append(EvaluationOutcome(ind.id, Status.SKIPPED_NO_TIME, reason="not enough time"))
                    continue
                if isinstance(pool, ThreadPoolExecutor):
                    fut = pool.submit(evaluate_local, ind.id, ind.graph, self.objective, self.handle, backends, limit)
                else:
                    fut = pool.submit(_evaluate_in_worker, ind.id, ind.graph.to_dict(), limit)
                running[fut] = (ind.id, time.monotonic())
            if not running:
                continue
            done, _ = wait(running, timeout=0.05, return_when=FIRST_COMPLETED)
            for fut in done:
                ind_id, _ = running.pop(fut)
                if fut in abandoned:
                    continue
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - broken worker
                    outcomes.append(EvaluationOutcome(ind_id, Status.DELETED_INVALID, reason=repr(exc)))
            if limit is not None:
                now = time.monotonic()
                for fut, (ind_id, started) in list(running.items()):
                    if fut not in abandoned and now - started > limit + self.watchdog_grace:
                        # the slot stays busy until the worker notices its deadline
                        abandoned.add(fut)
                        outcomes.append(EvaluationOutcome(ind_id, Status.DELETED_TIMEOUT, eval_time_sec=now - started,
                                                          reason="watchdog: per-pipeline limit exceeded"))
        return outcomes

    # -- remote
    def _remote_client(self):
        from pipevo.remote.client import RemoteClient

        if self._remote is None:
            self._remote = RemoteClient(self.infrastructure.remote_endpoint)
        return self._remote

    def _process_remote(self, inds: Sequence[Individual], timer: OptimizationTimer) -> list[EvaluationOutcome]:
        client = self._remote_client()
        try:
            client.healthz()
            if self._remote_dataset is None:
                self._remote_dataset = client.register_dataset(self.objective.dataset)
        except RemoteError as exc:
            raise InfrastructureUnavailable(str(exc)) from exc

        outcomes: dict[str, EvaluationOutcome] = {}
        startable = []
        for ind in inds:
            if timer.enough_time():
                startable.append(ind)
            else:
                outcomes[ind.id] = EvaluationOutcome(ind.id, Status.SKIPPED_NO_TIME, reason="not enough time")
        if startable:
            timelines = client.evaluate_population(
                [i.graph for i in startable], self._remote_dataset, seed=self.objective.seed,
                split_seed=self.objective.split_plan.seed, cv_folds=self.objective.split_plan.n_folds,
                batch=self.infrastructure.remote_batch, score_only=self.infrastructure.score_only,
                limit=timer.per_pipeline_limit_sec, fetch_workers=max(4, self.infrastructure.n_jobs),
                deadline=time.monotonic() + max(timer.remaining(), 0.0) + (timer.per_pipeline_limit_sec or 0.0))
            for ind, tl in zip(startable, timelines):
                timings = dict.fromkeys(STAGES, 0.0)
                timings.update(request=tl.request, wait=tl.wait, fetch=tl.fetch)
                if tl.status == "completed":
                    outcomes[ind.id] = EvaluationOutcome(ind.id, Status.EVALUATED, tl.fitness, timings, tl.end_to_end,
                                                         fold_scores=tl.fold_scores)
                elif tl.status == "timeout":
                    outcomes[ind.id] = EvaluationOutcome(ind.id, Status.DELETED_TIMEOUT, timings=timings,
                                                         eval_time_sec=tl.end_to_end, reason=tl.reason)
                else:
                    outcomes[ind.id] = EvaluationOutcome(ind.id, Status.DELETED_INVALID, timings=timings,
                                                         eval_time_sec=tl.end_to_end, reason=tl.reason)
        return [outcomes[i.id] for i in inds]


def process_population(inds: Sequence[Individual], objective: Objective, n_jobs: int, timer: OptimizationTimer,
                       infrastructure: InfrastructureDescriptor | None = None,
                       handle: CacheHandle | None = None) -> tuple[list[Individual], list[EvaluationOutcome]]:
    """One-shot form of :meth:`Dispatcher.process_population` with a throwaway pool."""
    infra = infrastructure or InfrastructureDescriptor(n_jobs=n_jobs)
    if infra.n_jobs != n_jobs:
        infra = InfrastructureDescriptor(**{**infra.__dict__, "n_jobs": n_jobs})
    with Dispatcher(objective, infra, handle) as dispatcher:
        return dispatcher.process_population(inds, timer)


def summarize_outcomes(outcomes: Iterable[EvaluationOutcome]) -> Mapping[str, int]:
    counts = dict.fromkeys((s.value for s in Status), 0)
    for o in outcomes:
        counts[o.status.value] += 1
    return counts


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
