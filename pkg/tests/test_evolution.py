from __future__ import annotations

import math

import pytest

from pipevo.cache import open_cache
from pipevo.errors import EmptyPopulation
from pipevo.evolution import RunLog, evolve, read_runlog, total_generation_time, trajectory_time_to
from pipevo.individual import OptimizationTimer, OptimizerConfig
from pipevo.objective import Objective


@pytest.fixture(scope="module")
def small_objective():
    from pipevo.data import synth_moons
    return Objective(synth_moons(120, 0.2, 1), seed=1)


def _cfg(**kw):
    base = dict(population_size=6, timeout_sec=60.0, max_generations=3, seed=5)
    base.update(kw)
    return OptimizerConfig(**base)


def test_timer_gate():
    t = OptimizationTimer(10.0, 2.5, started_at=0.0)
    t.elapsed = lambda: 7.5
    assert t.enough_time()
    t.elapsed = lambda: 7.6
    assert not t.enough_time()
    free = OptimizationTimer(10.0, None, started_at=0.0)
    free.elapsed = lambda: 9.99
    assert free.enough_time()


def test_config_defaults():
    cfg = OptimizerConfig(timeout_sec=40)
    assert cfg.population_size == 20 and cfg.per_pipeline_limit_sec == 10.0 and cfg.cv_folds == 5
    with pytest.raises(ValueError):
        OptimizerConfig(timeout_sec=1, per_pipeline_limit_sec=2)
    with pytest.raises(ValueError):
        OptimizerConfig(cv_folds=1)


def test_empty_population_when_nothing_can_start(small_objective):
    with pytest.raises(EmptyPopulation) as err:
        evolve(OptimizerConfig(population_size=4, timeout_sec=0.001, per_pipeline_limit_sec=0.001, seed=0),
                   small_objective)
    runlog = err.value.runlog
    assert runlog.best is None and len(runlog.generations) == 1
    assert runlog.status_counts()["skipped_no_time"] == 4


def test_deterministic_runs(small_objective):
    best_a, log_a = evolve(_cfg(), small_objective)
    best_b, log_b = evolve(_cfg(), small_objective)
    assert best_a.descriptor == best_b.descriptor and best_a.fitness == best_b.fitness
    assert log_a.comparable() == log_b.comparable()


def test_elitism_monotone_and_counts(small_objective):
    best, log = evolve(_cfg(max_generations=4), small_objective)
    series = [g.best_fitness for g in log.generations]
    assert all(b >= a for a, b in zip(series, series[1:]))
    assert best.fitness == series[-1] == max(r["fitness"] or 0 for r in log.records)
    # elites are carried without re-evaluation: 6 fresh in gen 0 then 5 per generation
    assert len(log.records) == 6 + 3 * 5
    assert log.evaluated_count == sum(r["status"] == "evaluated" for r in log.records)
    ids = [r["id"] for r in log.records]
    assert len(set(ids)) == len(ids) and ids[:2] == ["g0-0", "g0-1"]


def test_generation_times_telescope(small_objective):
    _, log = evolve(_cfg(), small_objective)
    for prev, cur in zip(log.generations, log.generations[1:]):
        assert cur.started_at == prev.ended_at
    assert log.generations[0].started_at == 0.0
    assert abs(total_generation_time(log) - log.generations[-1].ended_at) <= 1e-9
    assert total_generation_time(log) <= log.elapsed_sec + 1e-9


def test_budget_bound(small_objective):
    cfg = OptimizerConfig(population_size=6, timeout_sec=2.0, seed=2)
    _, log = evolve(cfg, small_objective)
    assert log.elapsed_sec <= cfg.timeout_sec + cfg.per_pipeline_limit_sec + 1.0
    assert total_generation_time(log) <= cfg.timeout_sec + cfg.per_pipeline_limit_sec


def test_runlog_jsonl(small_objective, tmp_path):
    path = tmp_path / "run.jsonl"
    best, log = evolve(_cfg(max_generations=2), small_objective, runlog_path=path)
    lines = read_runlog(path)
    assert lines[-1]["type"] == "summary" and lines[-1]["best_descriptor"] == best.descriptor
    for rec in lines[:-1]:
        assert {"descriptor", "fitness", "eval_time_sec", "generation", "cache_hits", "status"} <= set(rec)
        assert (rec["fitness"] is not None) == (rec["status"] == "evaluated")


def test_cache_reduces_fits(small_objective, cache_path):
    with open_cache(cache_path) as h:
        _, log = evolve(_cfg(), small_objective, handle=h)
    assert log.cache_stats.hits > 0
    assert log.cache_stats.hits + log.cache_stats.misses == sum(r["cache_hits"] + r["cache_misses"] for r in log.records)


def test_trajectory_helpers():
    log = RunLog(10.0, trajectory=[(0.5, 0.7), (2.0, 0.9)])
    assert trajectory_time_to(log, 0.8) == 2.0 and trajectory_time_to(log, 0.95) is None
    assert math.isclose(total_generation_time(RunLog(1.0)), 0.0)
