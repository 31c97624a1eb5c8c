from __future__ import annotations

import math

import numpy as np
import pytest

from pipevo.cache import open_cache
from pipevo.data import make_split_plan, synth_blobs
from pipevo.errors import InvalidPipeline
from pipevo.graph import OperationSpec, PipelineGraph, PipelineNode
from pipevo.metrics import multiclass_roc_auc
from pipevo.objective import Objective, objective


def test_separable_blobs_logit_is_perfect():
    ds = synth_blobs(400, 10, 0)
    res = objective(PipelineGraph.chain("logit"), ds, make_split_plan(ds, seed=0))
    assert res.fitness == 1.0 and res.fold_scores == [1.0] * 5


def test_fitness_is_mean_of_folds(moons):
    res = Objective(moons, seed=1)(PipelineGraph.chain("scaling", "knn"))
    assert len(res.fold_scores) == 5
    assert abs(res.fitness - math.fsum(res.fold_scores) / 5) <= 1e-12
    assert 0.0 <= res.fitness <= 1.0


def test_cache_on_off_identical(moons, cache_path):
    obj = Objective(moons, seed=2)
    g = PipelineGraph([PipelineNode("s", OperationSpec("scaling")), PipelineNode("p", OperationSpec("poly")),
                       PipelineNode("m", OperationSpec("rf_lite", {"n_trees": 4}), ("s", "p"))])
    plain = obj(g)
    with open_cache(cache_path) as h:
        cold = obj(g, h)
        warm = obj(g, h)
    assert plain.fold_scores == cold.fold_scores == warm.fold_scores
    assert warm.stats.hits == 3 * 5 and warm.nodes_fitted == 0


def test_fold_scores_match_manual_evaluation(moons):
    obj = Objective(moons, seed=3)
    g = PipelineGraph.chain("dt")
    res = obj(g)
    manual = []
    for k, (fit, score) in sorted(obj.split_plan.fold_assignments.items()):
        fitted = obj.fit_fold(g, k, None)
        manual.append(multiclass_roc_auc(moons.y[score], fitted.predict(moons.X[score])))
    assert res.fold_scores == manual


def test_holdout_is_separate(moons, cache_path):
    obj = Objective(moons, seed=4)
    with open_cache(cache_path) as h:
        obj(PipelineGraph.chain("logit"), h)
        before = len(h)
        auc, fitted = obj.holdout(PipelineGraph.chain("logit"), h)
        assert len(h) == before + 1 and fitted.fold_id == -1
    assert 0.0 <= auc <= 1.0


def test_transform_sink_rejected(moons):
    with pytest.raises(InvalidPipeline):
        Objective(moons)(PipelineGraph.chain("scaling"))


def test_multiclass(moons):
    rng = np.random.default_rng(0)
    from pipevo.data import Dataset
    ds = Dataset("three", rng.normal(size=(90, 3)), np.arange(90) % 3, 3)
    res = Objective(ds)(PipelineGraph.chain("logit"))
    assert 0.0 <= res.fitness <= 1.0
