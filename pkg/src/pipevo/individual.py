"""Individuals, optimizer configuration and the optimization timer."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

from pipevo.graph import DEFAULT_MAX_PIPELINE_SIZE, PipelineGraph

_ids = itertools.count()


def next_id(prefix: str = "ind") -> str:
    return f"{prefix}{next(_ids)}"


@dataclass
class Individual:
    graph: PipelineGraph
    id: str = field(default_factory=next_id)
    fitness: float | None = None
    eval_time_sec: float | None = None
    valid: bool = True
    parents: tuple[str, ...] = ()
    operator: str = "init"
    generation: int = 0

    def __post_init__(self):
        if self.fitness is not None and not self.valid:
            raise ValueError("an invalid individual cannot carry a fitness")

    @property
    def descriptor(self) -> str:
        return self.graph.descriptor()

    def rank_key(self) -> tuple:
        """Sort key: higher fitness first, then fewer nodes, then descriptor."""
        return (-(self.fitness if self.fitness is not None else -math.inf), len(self.graph), self.descriptor)


@dataclass
class Population:
    generation_index: int
    individuals: list[Individual]


@dataclass
class OptimizerConfig:
    population_size: int = 20
    timeout_sec: float = 60.0
    per_pipeline_limit_sec: float | None = None
    use_pipeline_limit: bool = True
    n_jobs: int = 1
    cv_folds: int = 5
    seed: int = 0
    mutation_prob: float = 0.8
    crossover_prob: float = 0.3
    max_pipeline_size: int = DEFAULT_MAX_PIPELINE_SIZE
    max_generations: int | None = None
    tournament_size: int = 3
    elitism: int = 1

    def __post_init__(self):
        if self.per_pipeline_limit_sec is None:
            self.per_pipeline_limit_sec = self.timeout_sec / 4.0
        if self.per_pipeline_limit_sec > self.timeout_sec:
            raise ValueError("per_pipeline_limit_sec must not exceed timeout_sec")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if self.population_size < 1 or self.n_jobs < 1:
            raise ValueError("population_size and n_jobs must be positive")

    @property
    def pipeline_limit(self) -> float | None:
        return self.per_pipeline_limit_sec if self.use_pipeline_limit else None


class OptimizationTimer:
    """Global budget gate.

    With a per-pipeline limit, an individual is started only if its worst
    case (``limit`` seconds) still fits in the remaining budget. Without one
    it is started whenever any budget remains.
    """

    def __init__(self, budget_sec: float, per_pipeline_limit_sec: float | None = None,
                 started_at: float | None = None):
        self.budget_sec = budget_sec
        self.per_pipeline_limit_sec = per_pipeline_limit_sec
        self.started_at = time.monotonic() if started_at is None else started_at

    def elapsed(self) -> float:
        return time.monotonic() - self.started_at

    def remaining(self) -> float:
        return self.budget_sec - self.elapsed()

    def enough_time(self) -> bool:
        if self.per_pipeline_limit_sec is None:
            return self.elapsed() < self.budget_sec
        return self.elapsed() + self.per_pipeline_limit_sec <= self.budget_sec
