from __future__ import annotations

import multiprocessing as mp
import random
import threading

import numpy as np
import pytest

import oracles
from conftest import graph_from_nodes
from pipevo.cache import (
    NO_FOLD,
    CacheEntry,
    CacheKey,
    derive_seed,
    fit_graph_with_cache,
    open_cache,
)
from pipevo.errors import CorruptCacheFile, DegenerateInput
from pipevo.graph import PipelineGraph, topological_order
from pipevo.operations import REGISTRY


def _entry(i: int, fold: int = 0, payload: bytes | None = None) -> CacheEntry:
    return CacheEntry(CacheKey(fold, f"/op{i}_{{}}"), payload if payload is not None else f"blob-{i}".encode() * 50)


class TestKeys:
    @pytest.mark.parametrize("fold,desc", [(0, "/logit_{}"), (-1, "(/scaling_{})/dt_{max_depth=3}"),
                                           (4, "(/a_{};/b_{x=1|2})/c_{}")])
    def test_render_parse(self, fold, desc):
        key = CacheKey(fold, desc)
        assert key.render() == f"{fold}|{desc}"
        assert CacheKey.parse(key.render()) == key

    def test_derive_seed_depends_on_both_inputs(self):
        assert derive_seed(1, "/a_{}") == derive_seed(1, "/a_{}")
        assert derive_seed(1, "/a_{}") != derive_seed(2, "/a_{}")
        assert derive_seed(1, "/a_{}") != derive_seed(1, "/b_{}")


class TestHandle:
    def test_create_empty(self, cache_path):
        with open_cache(cache_path, "create") as h:
            assert len(h) == 0
            assert h.stats.as_dict() == {"hits": 0, "misses": 0, "inserts": 0, "ignored_duplicate_inserts": 0}

    def test_persistence(self, cache_path):
        with open_cache(cache_path, "create") as h:
            h.put_many([_entry(i) for i in range(5)])
        with open_cache(cache_path, "open_existing") as h:
            assert len(h) == 5
            got = h.get_many([_entry(3).key])
            assert got[_entry(3).key].blob == _entry(3).blob

    def test_single_file_after_close(self, tmp_path):
        p = tmp_path / "c.db"
        with open_cache(p, "create") as h:
            h.put_many([_entry(i) for i in range(20)])
        assert sorted(x.name for x in tmp_path.iterdir()) == ["c.db"]

    def test_truncation_detected(self, tmp_path):
        p = tmp_path / "c.db"
        with open_cache(p, "create") as h:
            h.put_many([_entry(i, payload=bytes(3000)) for i in range(50)])
        data = p.read_bytes()
        rng = random.Random(0)
        for _ in range(10):
            cut = rng.randrange(1, len(data))
            q = tmp_path / f"t{cut}.db"
            q.write_bytes(data[:cut])
            with pytest.raises(CorruptCacheFile):
                open_cache(q, "open_existing")

    def test_foreign_file_rejected(self, tmp_path):
        p = tmp_path / "x.db"
        p.write_bytes(b"hello world" * 20)
        with pytest.raises(CorruptCacheFile):
            open_cache(p, "open_existing")

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            open_cache(tmp_path / "missing.db", "open_existing")

    def test_get_many_stats(self, cache_path):
        with open_cache(cache_path) as h:
            assert h.get_many([_entry(1).key, _entry(2).key]) == {}
            assert h.stats.misses == 2
            h.put_many([_entry(1)])
            got = h.get_many([_entry(1).key, _entry(2).key])
            assert list(got) == [_entry(1).key]
            s = h.stats
            assert (s.hits, s.misses) == (1, 3) and s.hits + s.misses == s.lookups

    def test_insert_or_ignore(self, cache_path):
        with open_cache(cache_path) as h:
            assert h.put_many([_entry(1)]) == 1
            assert h.put_many([_entry(1, payload=b"other")]) == 0
            assert h.get_many([_entry(1).key])[_entry(1).key].blob == _entry(1).blob
            existing = {e.key for e in [_entry(1)]}
            batch = [_entry(1), _entry(2)]
            assert h.put_many(batch) == sum(e.key not in existing for e in batch)
            assert h.stats.ignored_duplicate_inserts == 2

    def test_fold_is_part_of_key(self, cache_path):
        with open_cache(cache_path) as h:
            h.put_many([_entry(1, fold=0)])
            assert h.get_many([_entry(1, fold=1).key]) == {}
            assert h.contains_many([_entry(1, fold=0).key, _entry(1, fold=1).key]) == {_entry(1, fold=0).key}

    def test_threads_share_handle(self, cache_path):
        with open_cache(cache_path) as h:
            counts = []

            def work(w):
                counts.append(h.put_many([_entry(i) for i in range(100)]))
                assert len(h.get_many([_entry(i).key for i in range(100)])) == 100

            threads = [threading.Thread(target=work, args=(w,)) for w in range(8)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert sum(counts) == 100 and len(h) == 100

    def test_not_picklable(self, cache_path):
        import pickle
        with open_cache(cache_path) as h, pytest.raises(TypeError):
            pickle.dumps(h)


def _stress_worker(args):
    path, worker = args
    rng = random.Random(worker)
    keys = list(range(100))
    rng.shuffle(keys)
    inserted = 0
    with open_cache(path, "open_existing") as h:
        for chunk in range(0, 100, 10):
            batch = [_entry(i) for i in keys[chunk:chunk + 10]]
            inserted += h.put_many(batch)
            got = h.get_many([e.key for e in batch])
            assert all(got[e.key].blob == e.blob for e in batch)
    return inserted


@pytest.mark.slow
def test_concurrent_processes_insert_each_key_once(cache_path):
    open_cache(cache_path, "create").close()
    with mp.get_context("spawn").Pool(8) as pool:
        totals = pool.map(_stress_worker, [(str(cache_path), w) for w in range(8)])
    assert sum(totals) == 100
    with open_cache(cache_path, "open_existing") as h:
        got = h.get_many([_entry(i).key for i in range(100)])
        assert len(got) == 100 and all(got[_entry(i).key].blob == _entry(i).blob for i in range(100))


def _xy(ds, n=120):
    return ds.X[:n], ds.y[:n]


class TestFitGraph:
    def test_full_hit_second_time(self, moons, cache_path):
        g = PipelineGraph.chain("scaling", "pca", "logit")
        X, y = _xy(moons)
        with open_cache(cache_path) as h:
            first = fit_graph_with_cache(g, X, y, 0, h, seed=1)
            second = fit_graph_with_cache(g, X, y, 0, h, seed=1)
        assert first.stats.misses == 3 and first.stats.inserts == 3
        assert second.stats.hits == 3 and second.fitted_now == []

    def test_shared_prefix(self, moons, cache_path):
        a = PipelineGraph.chain("scaling", "logit")
        b = PipelineGraph.chain("scaling", "dt")
        assert a.descriptor("n0") == b.descriptor("n0")
        X, y = _xy(moons)
        with open_cache(cache_path) as h:
            fit_graph_with_cache(a, X, y, 0, h)
            res = fit_graph_with_cache(b, X, y, 0, h)
        assert (res.stats.hits, res.stats.misses) == (1, 1) and res.fitted_now == ["n1"]

    def test_prefix_hits_equal_shared_descriptor_count(self, moons, cache_path):
        rng = random.Random(7)
        X, y = _xy(moons, 80)
        for trial in range(15):
            a = graph_from_nodes(oracles.random_dag(rng, 5, transforms_only_inside=True))
            b = graph_from_nodes(oracles.random_dag(rng, 5, transforms_only_inside=True))
            path = cache_path.with_name(f"p{trial}.db")
            with open_cache(path) as h:
                try:
                    fit_graph_with_cache(a, X, y, 0, h)
                    res = fit_graph_with_cache(b, X, y, 0, h)
                except DegenerateInput:
                    continue
            shared = {a.descriptor(n) for n in a.nodes}
            assert res.stats.hits == sum(b.descriptor(n) in shared for n in b.nodes)

    def test_other_fold_misses(self, moons, cache_path):
        g = PipelineGraph.chain("scaling", "logit")
        X, y = _xy(moons)
        with open_cache(cache_path) as h:
            fit_graph_with_cache(g, X, y, 0, h)
            res = fit_graph_with_cache(g, X, y, NO_FOLD, h)
        assert res.stats.hits == 0 and res.stats.misses == 2

    def test_duplicate_subtrees_fit_once(self, moons, cache_path):
        nodes = {"m": ("logit", {}, ["a", "b"]), "a": ("scaling", {}, []), "b": ("scaling", {}, [])}
        X, y = _xy(moons)
        with open_cache(cache_path) as h:
            res = fit_graph_with_cache(graph_from_nodes(nodes), X, y, 0, h)
            assert len(res.fitted_now) == 2 and len(h) == 2
            again = fit_graph_with_cache(graph_from_nodes(nodes), X, y, 0, h)
            assert (again.stats.hits, again.stats.misses) == (3, 0)

    def test_cache_equivalence_random_graphs(self, blobs, tmp_path):
        rng = random.Random(11)
        X, y = blobs.X[:90], blobs.y[:90]
        checked = 0
        for trial in range(40):
            nodes = oracles.random_dag(rng, 6)
            g = graph_from_nodes(nodes)
            if _max_width(g, X.shape[1]) > 150:
                continue
            with open_cache(tmp_path / f"e{trial}.db") as h:
                try:
                    plain = fit_graph_with_cache(g, X, y, 0, None, seed=3)
                except DegenerateInput:
                    with pytest.raises(DegenerateInput):
                        fit_graph_with_cache(g, X, y, 0, h, seed=3)
                    continue
                cold = fit_graph_with_cache(g, X, y, 0, h, seed=3)
                warm = fit_graph_with_cache(g, X, y, 0, h, seed=3)
            for nid in g.nodes:
                blob = plain.nodes[nid].to_bytes()
                assert cold.nodes[nid].to_bytes() == blob and warm.nodes[nid].to_bytes() == blob
            assert np.array_equal(warm.predict(X), plain.predict(X))
            checked += 1
        assert checked >= 20


def _max_width(graph: PipelineGraph, cols: int) -> int:
    widths = {}
    for nid in topological_order(graph):
        preds = graph[nid].predecessors
        w_in = cols if not preds else sum(widths[p] for p in preds)
        widths[nid] = REGISTRY.output_width(graph[nid].spec, w_in, 2)
    return max(widths.values())
