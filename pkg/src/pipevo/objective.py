"""Cross-validated ROC AUC fitness of a pipeline graph."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from pipevo.cache import NO_FOLD, CacheHandle, CacheStats, FittedPipeline, fit_graph_with_cache
from pipevo.data import Dataset, SplitPlan, make_split_plan
from pipevo.errors import InvalidPipeline
from pipevo.graph import DEFAULT_MAX_PIPELINE_SIZE, PipelineGraph, validate_graph
from pipevo.metrics import multiclass_roc_auc
from pipevo.operations import REGISTRY, OperationRegistry


@dataclass
class ObjectiveResult:
    fitness: float
    fold_scores: list[float]
    stats: CacheStats = field(default_factory=CacheStats)
    timings: dict[str, float] = field(default_factory=dict)
    nodes_fitted: int = 0


def check_pipeline(graph: PipelineGraph, registry: OperationRegistry = REGISTRY,
                   max_pipeline_size: int = DEFAULT_MAX_PIPELINE_SIZE) -> None:
    report = validate_graph(graph, max_pipeline_size, known_operations=registry._ops)
    if not report.ok:
        raise InvalidPipeline("; ".join(report.violations))
    if registry.get(graph[graph.root].spec.name).kind != "model":
        raise InvalidPipeline("pipeline sink must be a model")


class Objective:
    """Mean CV AUC over the folds of a split plan (higher is better).

    Holds everything an evaluation needs except the cache handle, so it can
    be shipped to worker processes.
    """

    def __init__(self, dataset: Dataset, split_plan: SplitPlan | None = None, seed: int = 0,
                 folds: int = 5, registry: OperationRegistry = REGISTRY,
                 max_pipeline_size: int = DEFAULT_MAX_PIPELINE_SIZE):
        self.dataset = dataset
        self.split_plan = split_plan or make_split_plan(dataset, folds=folds, seed=seed)
        self.seed = seed
        self.registry = registry
        self.max_pipeline_size = max_pipeline_size

    @property
    def train_shape(self) -> tuple[int, int]:
        return len(self.split_plan.train_indices), self.dataset.X.shape[1]

    @property
    def fold_rows(self) -> int:
        return max(len(fit) for fit, _ in self.split_plan.fold_assignments.values())

    def fit_fold(self, graph: PipelineGraph, fold_id: int, handle: CacheHandle | None,
                 check: Callable[[], None] | None = None) -> FittedPipeline:
        if fold_id == NO_FOLD:
            idx = self.split_plan.train_indices
        else:
            idx = self.split_plan.fold_assignments[fold_id][0]
        X, y = self.dataset.subset(idx)
        return fit_graph_with_cache(graph, X, y, fold_id, handle, self.seed, self.dataset.n_classes,
                                    self.registry, check)

    def __call__(self, graph: PipelineGraph, handle: CacheHandle | None = None,
                 check: Callable[[], None] | None = None) -> ObjectiveResult:
        check_pipeline(graph, self.registry, self.max_pipeline_size)
        scores = []
        stats = CacheStats()
        timings = {"cache_load": 0.0, "fit": 0.0, "cache_save": 0.0, "score": 0.0}
        fitted_count = 0
        for fold_id in sorted(self.split_plan.fold_assignments):
            if check is not None:
                check()
            fitted = self.fit_fold(graph, fold_id, handle, check)
            stats = stats + fitted.stats
            fitted_count += len(fitted.fitted_now)
            for k, v in fitted.timings.items():
                timings[k] += v
            t0 = time.perf_counter()
            X, y = self.dataset.subset(self.split_plan.fold_assignments[fold_id][1])
            scores.append(multiclass_roc_auc(y, fitted.predict(X, self.registry)))
            timings["score"] += time.perf_counter() - t0
        return ObjectiveResult(float(np.mean(scores)), scores, stats, timings, fitted_count)

    def holdout(self, graph: PipelineGraph, handle: CacheHandle | None = None) -> tuple[float, FittedPipeline]:
        """Refit on the whole training split (fold -1) and score the validation rows.

        Reporting only; never fed back into selection.
        """
        check_pipeline(graph, self.registry, self.max_pipeline_size)
        fitted = self.fit_fold(graph, NO_FOLD, handle)
        X, y = self.dataset.subset(self.split_plan.validation_indices)
        return multiclass_roc_auc(y, fitted.predict(X, self.registry)), fitted


def objective(graph: PipelineGraph, dataset: Dataset, split_plan: SplitPlan,
              handle: CacheHandle | None = None, seed: int = 0) -> ObjectiveResult:
    return Objective(dataset, split_plan, seed)(graph, handle)
