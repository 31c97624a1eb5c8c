from __future__ import annotations

import os
import signal
import subprocess
import sys
import threading
import time

import pytest

from pipevo.data import make_split_plan, synth_moons
from pipevo.errors import (
    ChecksumMismatch,
    DecodeError,
    EndpointUnreachable,
    NotCompleted,
    UnknownDataset,
    UnknownTask,
)
from pipevo.graph import OperationSpec, PipelineGraph
from pipevo.objective import Objective
from pipevo.operations import FittedOperation, predict_operation
from pipevo.remote import Coordinator, RemoteClient, Worker, decode_archive, encode_archive
from pipevo.remote.archive import HEADER, unpack_blobs

ORDER = ["pending", "running", "completed", "failed"]


@pytest.fixture(scope="module")
def dataset():
    return synth_moons(150, 0.2, 3)


@pytest.fixture
def coordinator():
    with Coordinator(heartbeat_interval=0.25) as c:
        yield c


@pytest.fixture
def client(coordinator):
    with RemoteClient(coordinator.address) as c:
        yield c


@pytest.fixture
def ref(client, dataset):
    return client.register_dataset(dataset)


def _sleepy(seconds: float) -> PipelineGraph:
    return PipelineGraph.chain(OperationSpec("sleep", {"seconds": seconds}), "logit")


class TestArchive:
    def test_round_trip_and_deterministic(self):
        metrics = {"fitness": 0.75, "fold_scores": [0.5, 1.0]}
        a = encode_archive(metrics, {"x": 1})
        assert a == encode_archive(metrics, {"x": 1}) and a[:4] == b"RRA1" and HEADER.size == 16
        assert decode_archive(a) == (metrics, {"x": 1})
        assert decode_archive(encode_archive(metrics)) == (metrics, None)

    def test_corruption(self):
        a = bytearray(encode_archive({"fitness": 1.0}))
        a[-3] ^= 0xFF
        with pytest.raises(ChecksumMismatch):
            decode_archive(bytes(a))
        with pytest.raises(ChecksumMismatch):
            decode_archive(encode_archive({"fitness": 1.0})[:-1])
        with pytest.raises(DecodeError):
            decode_archive(b"XXXX" + bytes(20))
        with pytest.raises(DecodeError):
            decode_archive(b"RR")
        import zlib
        junk = b"not a zip"
        with pytest.raises(DecodeError):
            decode_archive(HEADER.pack(b"RRA1", len(junk), zlib.crc32(junk)) + junk)


class TestProtocol:
    def test_create_pending(self, client, ref):
        tid = client.create_task(PipelineGraph.chain("logit"), ref)
        assert tid and client.poll_status(tid).status == "pending"

    def test_unknown_dataset(self, client):
        with pytest.raises(UnknownDataset):
            client.create_task(PipelineGraph.chain("logit"), "nope")
        with pytest.raises(UnknownDataset):
            client.create_task_batch([PipelineGraph.chain("logit")], "nope")
        assert client.list_tasks() == []

    def test_fifty_distinct_ids(self, client, ref):
        ids = {client.create_task(PipelineGraph.chain("dt"), ref) for _ in range(50)}
        assert len(ids) == 50

    def test_batches(self, client, ref):
        assert client.create_task_batch([], ref) == []
        assert client.list_tasks() == []
        ids = client.create_task_batch([PipelineGraph.chain("knn")] * 200, ref)
        listing = client.list_tasks()
        assert len(set(ids)) == 200 and [t.task_id for t in listing] == ids
        assert {t.status for t in listing} == {"pending"}
        one = client.create_task_batch([PipelineGraph.chain("knn")], ref)[0]
        single = client.create_task(PipelineGraph.chain("knn"), ref)
        a, b = client.poll_status(one), client.poll_status(single)
        assert (a.status, a.queued, a.compute) == (b.status, b.queued, b.compute)

    def test_unknown_task_and_not_completed(self, client, ref):
        with pytest.raises(UnknownTask):
            client.poll_status("abc123")
        tid = client.create_task(PipelineGraph.chain("logit"), ref)
        with pytest.raises(NotCompleted):
            client.fetch_result(tid)

    def test_bad_requests(self, client, ref):
        from pipevo.errors import RemoteError
        with pytest.raises(RemoteError):
            client.create_task(PipelineGraph.chain("logit"), ref, limits={"cpu_fraction": 1.5})

    def test_unreachable(self):
        with RemoteClient("http://127.0.0.1:9", timeout=2) as c, pytest.raises(EndpointUnreachable):
            c.healthz()


class TestWorker:
    def test_score_only_and_full(self, client, ref, coordinator, dataset):
        w = Worker(coordinator.address, slots=2, heartbeat_interval=0.25, claim_wait=0.2).start()
        try:
            g = PipelineGraph.chain("scaling", "logit")
            light = client.create_task(g, ref, score_only=True, seed=4)
            full = client.create_task(g, ref, score_only=False, seed=4)
            assert client.wait(light, 30).status == "completed"
            assert client.wait(full, 30).status == "completed"
        finally:
            w.stop()
        res = client.fetch_result(light)
        assert res.pipeline is None and 0.0 <= res.metrics["fitness"] <= 1.0
        assert client.fetch_result(light).archive == res.archive
        assert client.poll_status(light).status == "completed"
        res_full = client.fetch_result(full)
        blobs = unpack_blobs(res_full.pipeline)
        ops = {nid: FittedOperation.from_bytes(b) for nid, b in blobs.items()}
        assert set(ops) == {"n0", "n1"}
        # the fetched pipeline predicts like a local holdout refit
        obj = Objective(dataset, make_split_plan(dataset, seed=4), seed=4)
        _, local = obj.holdout(g)
        X = dataset.X[:20]
        remote_pred = predict_operation(ops["n1"], predict_operation(ops["n0"], X))
        assert (remote_pred == local.predict(X)).all()

    def test_local_remote_equivalence(self, client, ref, coordinator, dataset):
        graphs = [PipelineGraph.chain("dt"), PipelineGraph.chain("poly", "knn"),
                  PipelineGraph.chain("scaling", OperationSpec("rf_lite", {"n_trees": 4}))]
        w = Worker(coordinator.address, slots=2, heartbeat_interval=0.25, claim_wait=0.2).start()
        try:
            tls = client.evaluate_population(graphs, ref, seed=7, split_seed=8, cv_folds=4)
        finally:
            w.stop()
        obj = Objective(dataset, make_split_plan(dataset, folds=4, seed=8), seed=7)
        for g, tl in zip(graphs, tls):
            local = obj(g)
            assert tl.status == "completed"
            assert abs(tl.fitness - local.fitness) <= 1e-9 and tl.fold_scores == local.fold_scores

    def test_timeline_identity_and_status_order(self, client, ref, coordinator):
        seen: dict[str, list[str]] = {}
        stop = threading.Event()

        def observe():
            with RemoteClient(coordinator.address) as c:
                while not stop.is_set():
                    for t in c.list_tasks():
                        hist = seen.setdefault(t.task_id, [])
                        if not hist or hist[-1] != t.status:
                            hist.append(t.status)
                    time.sleep(0.01)

        obs = threading.Thread(target=observe)
        obs.start()
        w = Worker(coordinator.address, slots=2, heartbeat_interval=0.25, claim_wait=0.2).start()
        try:
            tls = client.evaluate_population([_sleepy(0.05)] * 6, ref, cv_folds=2)
            tls += client.evaluate_population([_sleepy(0.05)] * 6, ref, cv_folds=2, batch=True)
        finally:
            w.stop()
            stop.set()
            obs.join()
        for tl in tls:
            assert tl.status == "completed"
            assert abs(tl.end_to_end - tl.stage_sum) <= 0.1, tl
        for hist in seen.values():
            idx = [ORDER.index(s) for s in hist]
            assert idx == sorted(idx) and not ({"completed", "failed"} <= set(hist))

    def test_slot_bound(self, client, ref, coordinator):
        ids = client.create_task_batch([_sleepy(0.1)] * 8, ref, cv_folds=2)
        w = Worker(coordinator.address, slots=4, heartbeat_interval=0.25, claim_wait=0.2).start()
        peak = 0
        try:
            deadline = time.monotonic() + 30
            while time.monotonic() < deadline:
                listing = client.list_tasks()
                peak = max(peak, sum(t.status == "running" for t in listing))
                if all(t.status == "completed" for t in listing):
                    break
                time.sleep(0.01)
        finally:
            w.stop()
        assert 2 <= peak <= 4
        assert all(client.poll_status(t).status == "completed" for t in ids)

    def test_timeout_reported(self, client, ref, coordinator):
        w = Worker(coordinator.address, slots=1, heartbeat_interval=0.25, claim_wait=0.2).start()
        try:
            tls = client.evaluate_population([_sleepy(2.0)], ref, limit=0.2)
        finally:
            w.stop()
        assert tls[0].status == "timeout" and tls[0].reason.startswith("EvaluationTimeout")

    def test_failure_reported(self, client, ref, coordinator):
        w = Worker(coordinator.address, slots=1, heartbeat_interval=0.25, claim_wait=0.2).start()
        try:
            tid = client.create_task(PipelineGraph.chain("scaling"), ref)
            st = client.wait(tid, 30)
        finally:
            w.stop()
        assert st.status == "failed" and "InvalidPipeline" in st.failure_reason

    def test_throttle_scales_compute_stage(self, client, ref, coordinator):
        g = PipelineGraph.chain(OperationSpec("rf_lite", {"n_trees": 8}))
        w = Worker(coordinator.address, slots=1, heartbeat_interval=0.25, claim_wait=0.2).start()
        try:
            client.wait(client.create_task(g, ref), 60)  # worker caches the dataset
            runs = []
            for fraction in (1.0, 0.2, 1.0, 0.2):
                tid = client.create_task(g, ref, limits={"cpu_fraction": fraction})
                stage = client.wait(tid, 60).compute
                runs.append((fraction, stage, client.fetch_result(tid).metrics["compute_sec"]))
        finally:
            w.stop()
        # the compute stage is the evaluation stretched by 1/f, plus the claim/complete round trip
        for fraction, stage, evaluation in runs:
            assert evaluation / fraction <= stage + 1e-3, (fraction, stage, evaluation)
            assert stage <= evaluation / fraction + 0.25, (fraction, stage, evaluation)


class TestFailureModes:
    def test_killed_worker_heartbeat_lost(self, coordinator, client, ref):
        tid = client.create_task(_sleepy(30.0), ref, cv_folds=2)
        env = {**os.environ, "PYTHONPATH": os.pathsep.join(sys.path)}
        proc = subprocess.Popen([sys.executable, "-m", "pipevo.cli", "worker", "--coordinator", coordinator.address,
                                 "--heartbeat", "0.25"], env=env, stdout=subprocess.DEVNULL,
                                stderr=subprocess.DEVNULL)
        try:
            deadline = time.monotonic() + 30
            while client.poll_status(tid).status != "running":
                assert time.monotonic() < deadline
                time.sleep(0.05)
            time.sleep(0.6)
            assert client.poll_status(tid).status == "running"  # heartbeats keep it alive
            proc.send_signal(signal.SIGKILL)
            proc.wait()
            killed = time.monotonic()
            st = client.wait(tid, 10)
        finally:
            if proc.poll() is None:
                proc.kill()
        assert st.status == "failed" and st.failure_reason == "worker heartbeat lost"
        assert time.monotonic() - killed <= 3 * 0.25 + 2.0

    def test_coordinator_restart(self, tmp_path, dataset):
        db = tmp_path / "tasks.db"
        with Coordinator(db) as c1, RemoteClient(c1.address) as cl:
            ref = cl.register_dataset(dataset)
            w = Worker(c1.address, slots=1, heartbeat_interval=0.25, claim_wait=0.2).start()
            try:
                done = cl.create_task(PipelineGraph.chain("logit"), ref)
                assert cl.wait(done, 30).status == "completed"
            finally:
                w.stop()
            archive = cl.fetch_result(done).archive
            waiting = cl.create_task(PipelineGraph.chain("logit"), ref)
        with Coordinator(db) as c2, RemoteClient(c2.address) as cl:
            assert cl.poll_status(done).status == "completed"
            assert cl.fetch_result(done).archive == archive
            st = cl.poll_status(waiting)
            assert st.status == "failed" and st.failure_reason == "coordinator restart"

    def test_population_deadline(self, client, ref):
        # no workers: everything is still pending at the deadline
        tls = client.evaluate_population([PipelineGraph.chain("logit")] * 3, ref,
                                         deadline=time.monotonic() + 0.3)
        assert [t.status for t in tls] == ["timeout"] * 3
