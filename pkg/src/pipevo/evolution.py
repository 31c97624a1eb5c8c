"""Generation-synchronous evolutionary search over pipeline graphs."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from pipevo.cache import CacheHandle, CacheStats
from pipevo.dispatcher import Dispatcher, EvaluationOutcome, InfrastructureDescriptor, Status, summarize_outcomes
from pipevo.errors import EmptyPopulation
from pipevo.individual import Individual, OptimizationTimer, OptimizerConfig, Population
from pipevo.objective import Objective
from pipevo.variation import crossover, initial_population, mutate

log = logging.getLogger(__name__)

# fields that depend on the wall clock; excluded when comparing runs
WALL_CLOCK_FIELDS = frozenset({"eval_time_sec", "timings", "started_at", "ended_at", "wall_time_sec",
                               "elapsed_sec", "trajectory", "generation_times", "stage_timings", "reason"})


@dataclass
class GenerationRecord:
    index: int
    started_at: float
    ended_at: float
    counts: dict[str, int]
    best_fitness: float | None

    @property
    def wall_time_sec(self) -> float:
        return self.ended_at - self.started_at


@dataclass
class RunLog:
    """Everything recorded during one :func:`evolve` call.

    Times are seconds since the start of the run. ``trajectory`` holds one
    ``(elapsed, best_fitness)`` point each time the best-so-far improves.
    """

    budget_sec: float
    records: list[dict[str, Any]] = field(default_factory=list)
    generations: list[GenerationRecord] = field(default_factory=list)
    trajectory: list[tuple[float, float]] = field(default_factory=list)
    cache_stats: CacheStats = field(default_factory=CacheStats)
    stage_timings: dict[str, float] = field(default_factory=dict)
    events: list[str] = field(default_factory=list)
    elapsed_sec: float = 0.0
    best: Individual | None = None

    @property
    def generation_times(self) -> list[float]:
        return [g.wall_time_sec for g in self.generations]

    @property
    def evaluated_count(self) -> int:
        return sum(g.counts.get(Status.EVALUATED.value, 0) for g in self.generations)

    def status_counts(self) -> dict[str, int]:
        total = dict.fromkeys((s.value for s in Status), 0)
        for g in self.generations:
            for k, v in g.counts.items():
                total[k] += v
        return total

    def summary(self) -> dict[str, Any]:
        best = self.best
        return {
            "type": "summary",
            "best_id": best.id if best else None,
            "best_descriptor": best.descriptor if best else None,
            "best_fitness": best.fitness if best else None,
            "best_graph": best.graph.to_dict() if best else None,
            "generations": len(self.generations),
            "evaluated_pipeline_count": self.evaluated_count,
            "status_counts": self.status_counts(),
            "cache_stats": self.cache_stats.as_dict(),
            "stage_timings": dict(self.stage_timings),
            "generation_times": self.generation_times,
            "trajectory": [list(p) for p in self.trajectory],
            "elapsed_sec": self.elapsed_sec,
            "budget_sec": self.budget_sec,
            "events": list(self.events),
        }

    def lines(self) -> list[dict[str, Any]]:
        return [*self.records, self.summary()]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.lines():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def comparable(self) -> list[dict[str, Any]]:
        """Records with wall-clock fields removed (for determinism checks)."""
        return [{k: v for k, v in rec.items() if k not in WALL_CLOCK_FIELDS} for rec in self.lines()]


def read_runlog(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def best_of(individuals) -> Individual | None:
    scored = [i for i in individuals if i.fitness is not None]
    return min(scored, key=Individual.rank_key) if scored else None


def tournament(candidates: list[Individual], rng: np.random.Generator, size: int) -> Individual:
    picks = rng.choice(len(candidates), size=min(size, len(candidates)), replace=False)
    return min((candidates[int(i)] for i in picks), key=Individual.rank_key)


def next_generation(candidates: list[Individual], config: OptimizerConfig, rng: np.random.Generator,
                    generation: int, registry) -> Population:
    """Elites plus offspring produced by crossover then mutation."""
    ranked = sorted(candidates, key=Individual.rank_key)
    elites = ranked[: config.elitism]
    offspring: list[Individual] = []
    while len(offspring) < config.population_size - len(elites):
        a = tournament(candidates, rng, config.tournament_size)
        children = [a]
        if len(candidates) > 1 and rng.random() < config.crossover_prob:
            b = tournament(candidates, rng, config.tournament_size)
            children = list(crossover(a, b, rng, registry, config.max_pipeline_size))
        for child in children:
            # an untouched copy would only re-evaluate its parent, so always vary those
            if child is a or child.operator == "unchanged" or rng.random() < config.mutation_prob:
                mutated = mutate(child, rng, registry, config.max_pipeline_size)
                if child is not a:
                    mutated.parents = child.parents
                    mutated.operator = f"{child.operator}+{mutated.operator}"
                child = mutated
            offspring.append(child)
    offspring = offspring[: config.population_size - len(elites)]
    individuals = []
    for i, child in enumerate(offspring):
        child.id = f"g{generation}-{i}"
        child.generation = generation
        child.fitness = None
        child.valid = True
        individuals.append(child)
    return Population(generation, elites + individuals)


def _record(ind: Individual, out: EvaluationOutcome, generation: int, t0: float, t1: float) -> dict[str, Any]:
    return {
        "type": "individual",
        "id": ind.id,
        "generation": generation,
        "descriptor": ind.descriptor,
        "status": out.status.value,
        "fitness": out.fitness,
        "eval_time_sec": out.eval_time_sec,
        "cache_hits": out.cache_stats.hits,
        "cache_misses": out.cache_stats.misses,
        "parents": list(ind.parents),
        "operator": ind.operator,
        "timings": dict(out.timings),
        "reason": out.reason,
        "started_at": t0,
        "ended_at": t1,
    }


def evolve(config: OptimizerConfig, objective: Objective, handle: CacheHandle | None = None,
           dispatcher: Dispatcher | None = None, infrastructure: InfrastructureDescriptor | None = None,
           runlog_path: str | Path | None = None) -> tuple[Individual, RunLog]:
    """Run the optimizer until the budget or ``max_generations`` runs out.

    Returns the best individual and the run log. Raises
    :class:`EmptyPopulation` when no individual was ever evaluated; the
    partial run log is attached to the exception as ``runlog``.
    """
    registry = objective.registry
    rng = np.random.default_rng(config.seed)
    timer = OptimizationTimer(config.timeout_sec, config.pipeline_limit)
    runlog = RunLog(config.timeout_sec)
    own_dispatcher = dispatcher is None
    if own_dispatcher:
        dispatcher = Dispatcher(objective, infrastructure or InfrastructureDescriptor(n_jobs=config.n_jobs), handle)

    population = initial_population(config, registry, rng)
    best: Individual | None = None
    elite_ids: set[str] = set()
    try:
        while True:
            gen = population.generation_index
            # generation spans telescope so their sum is the run time
            start = runlog.generations[-1].ended_at if runlog.generations else 0.0
            fresh = [i for i in population.individuals if i.id not in elite_ids]
            carried = [i for i in population.individuals if i.id in elite_ids]
            survivors, outcomes = dispatcher.process_population(fresh, timer)
            end = timer.elapsed()
            for ind, out in zip(fresh, outcomes):
                runlog.records.append(_record(ind, out, gen, start, end))
                runlog.cache_stats = runlog.cache_stats + out.cache_stats
                for k, v in out.timings.items():
                    runlog.stage_timings[k] = runlog.stage_timings.get(k, 0.0) + v
            counts = dict(summarize_outcomes(outcomes))
            for msg in dispatcher.events:
                if msg not in runlog.events:
                    runlog.events.append(msg)

            candidates = carried + survivors
            gen_best = best_of(candidates)
            if gen_best is not None and (best is None or gen_best.rank_key() < best.rank_key()):
                best = gen_best
                runlog.trajectory.append((end, best.fitness))
            runlog.generations.append(GenerationRecord(gen, start, end, counts, best.fitness if best else None))
            log.info("generation %d: %s best=%s", gen, counts, best.fitness if best else None)

            if not survivors and not carried:
                if best is None:
                    raise EmptyPopulation(f"every individual of generation {gen} was deleted or skipped")
                runlog.events.append(f"generation {gen} produced no candidates; keeping best-so-far")
                candidates = [best]
            if config.max_generations is not None and gen + 1 >= config.max_generations:
                break
            if not timer.enough_time():
                break
            population = next_generation(candidates, config, rng, gen + 1, registry)
            elite_ids = {i.id for i in population.individuals[: config.elitism]}
    except EmptyPopulation as exc:
        runlog.elapsed_sec = timer.elapsed()
        exc.runlog = runlog
        if runlog_path is not None:
            runlog.write_jsonl(runlog_path)
        raise
    finally:
        if own_dispatcher:
            dispatcher.close()

    runlog.elapsed_sec = timer.elapsed()
    runlog.best = best
    if runlog_path is not None:
        runlog.write_jsonl(runlog_path)
    return best, runlog


def total_generation_time(runlog: RunLog) -> float:
    return math.fsum(runlog.generation_times)


def trajectory_time_to(runlog: RunLog, fitness: float) -> float | None:
    """First elapsed time at which the best-so-far reached ``fitness``."""
    for t, f in runlog.trajectory:
        if f >= fitness:
            return t
    return None
