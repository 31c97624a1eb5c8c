"""Worker runtime: claims tasks from a coordinator and evaluates them.

A worker is one long-lived process with ``slots`` evaluation threads and a
heartbeat thread. ``cpu_fraction`` < 1 emulates a CPU quota by sleeping
``compute * (1/f - 1)`` after each evaluation, so wall time scales as 1/f.
"""

from __future__ import annotations

import io
import logging
import os
import socket
import threading
import time
import traceback
from typing import Any

import numpy as np
import requests

from pipevo.data import Dataset, make_split_plan
from pipevo.deadline import deadline_scope, check_deadline
from pipevo.errors import EvaluationTimeout
from pipevo.graph import PipelineGraph
from pipevo.objective import Objective
from pipevo.remote.archive import encode_archive, pack_blobs
from pipevo.remote.coordinator import DEFAULT_HEARTBEAT_SEC

log = logging.getLogger(__name__)


def dataset_from_payload(payload: dict[str, Any]) -> Dataset:
    """Rebuild a dataset registered through ``POST /datasets``.

    Features are parsed straight from the ``repr``-formatted CSV so values
    round-trip exactly; the last column holds integer labels.
    """
    table = np.loadtxt(io.StringIO(payload["csv"]), delimiter=",", skiprows=1, ndmin=2)
    y = table[:, -1].astype(np.int64)
    n_classes = int(payload.get("n_classes") or (int(y.max()) + 1))
    return Dataset(payload["name"], table[:, :-1], y, n_classes)


def evaluate_task(task: dict[str, Any], dataset: Dataset) -> dict[str, Any]:
    """Cross-validated fitness of one task; the metrics.json document."""
    graph = PipelineGraph.from_dict(task["graph"])
    plan = make_split_plan(dataset, folds=task["cv_folds"], seed=task["split_seed"])
    objective = Objective(dataset, plan, seed=task["seed"])
    limit = task["limits"].get("time_sec")
    t0 = time.perf_counter()
    with deadline_scope(None if limit is None else time.monotonic() + float(limit)):
        result = objective(graph, None, check_deadline)
    metrics = {
        "fitness": result.fitness,
        "fold_scores": result.fold_scores,
        "timings": result.timings,
        "nodes_fitted": result.nodes_fitted,
        "descriptor": graph.descriptor(),
    }
    pipeline = None
    if not task["score_only"]:
        _, fitted = objective.holdout(graph)
        pipeline = pack_blobs(task["graph"], {nid: op.to_bytes() for nid, op in fitted.nodes.items()})
    metrics["compute_sec"] = time.perf_counter() - t0
    return {"metrics": metrics, "pipeline": pipeline}


class Worker:
    def __init__(self, address: str, slots: int = 1, cpu_fraction: float | None = None,
                 heartbeat_interval: float = DEFAULT_HEARTBEAT_SEC, claim_wait: float = 1.0,
                 worker_id: str | None = None):
        if slots < 1:
            raise ValueError("slots must be >= 1")
        if cpu_fraction is not None and not 0 < cpu_fraction <= 1:
            raise ValueError("cpu_fraction must be in (0, 1]")
        self.address = address.rstrip("/")
        self.slots = slots
        self.cpu_fraction = cpu_fraction
        self.heartbeat_interval = heartbeat_interval
        self.claim_wait = claim_wait
        self.worker_id = worker_id or f"{socket.gethostname()}-{os.getpid()}-{id(self) & 0xffff:x}"
        self.stop_event = threading.Event()
        self._running: set[str] = set()
        self._lock = threading.Lock()
        self._datasets: dict[str, Dataset] = {}
        self._local = threading.local()
        self.completed = 0

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _post(self, path: str, **kwargs) -> requests.Response:
        return self._session().post(self.address + path, timeout=60, **kwargs)

    def _dataset(self, name: str) -> Dataset:
        with self._lock:
            if name in self._datasets:
                return self._datasets[name]
        resp = self._session().get(f"{self.address}/datasets/{name}", timeout=60)
        resp.raise_for_status()
        ds = dataset_from_payload(resp.json())
        with self._lock:
            return self._datasets.setdefault(name, ds)

    def _heartbeat_loop(self) -> None:
        while not self.stop_event.wait(self.heartbeat_interval):
            with self._lock:
                ids = sorted(self._running)
            if not ids:
                continue
            try:
                self._post("/workers/heartbeat", json={"worker_id": self.worker_id, "task_ids": ids})
            except requests.RequestException as exc:
                log.warning("heartbeat failed: %s", exc)

    def _run_task(self, task: dict[str, Any]) -> None:
        task_id = task["task_id"]
        fraction = self.cpu_fraction if self.cpu_fraction is not None else task["limits"].get("cpu_fraction", 1.0)
        with self._lock:
            self._running.add(task_id)
        try:
            t0 = time.perf_counter()
            try:
                out = evaluate_task(task, self._dataset(task["dataset_ref"]))
            except EvaluationTimeout as exc:
                self._post(f"/tasks/{task_id}/fail", json={"reason": f"EvaluationTimeout: {exc}"})
                return
            except Exception as exc:  # noqa: BLE001 - report and move on
                log.debug("task %s failed:\n%s", task_id, traceback.format_exc())
                self._post(f"/tasks/{task_id}/fail", json={"reason": f"{type(exc).__name__}: {exc}"})
                return
            compute = time.perf_counter() - t0
            if fraction < 1.0:
                self.stop_event.wait(compute * (1.0 / fraction - 1.0))
            out["metrics"]["cpu_fraction"] = fraction
            archive = encode_archive(out["metrics"], out["pipeline"])
            self._post(f"/tasks/{task_id}/complete", data=archive,
                       headers={"Content-Type": "application/octet-stream"})
            self.completed += 1
        finally:
            with self._lock:
                self._running.discard(task_id)

    def _slot_loop(self) -> None:
        while not self.stop_event.is_set():
            try:
                resp = self._post("/workers/claim", json={"worker_id": self.worker_id, "wait": self.claim_wait})
            except requests.RequestException as exc:
                log.warning("claim failed: %s", exc)
                self.stop_event.wait(self.claim_wait)
                continue
            if resp.status_code != 200:
                continue
            try:
                self._run_task(resp.json())
            except requests.RequestException as exc:
                log.warning("lost contact while reporting: %s", exc)

    def run(self) -> None:
        """Serve until :attr:`stop_event` is set."""
        threads = [threading.Thread(target=self._heartbeat_loop, daemon=True, name="heartbeat")]
        threads += [threading.Thread(target=self._slot_loop, daemon=True, name=f"slot-{i}") for i in range(self.slots)]
        for t in threads:
            t.start()
        try:
            while not self.stop_event.wait(0.5):
                pass
        finally:
            self.stop_event.set()
            for t in threads:
                t.join(timeout=self.claim_wait + 5)

    def start(self) -> Worker:
        """Run in a background thread (tests and in-process benchmarks)."""
        self._thread = threading.Thread(target=self.run, daemon=True, name=f"worker-{self.worker_id}")
        self._thread.start()
        return self

    def stop(self) -> None:
        self.stop_event.set()
        if getattr(self, "_thread", None) is not None:
            self._thread.join(timeout=self.claim_wait + 10)


def run_worker(address: str, slots: int = 1, cpu_fraction: float | None = None,
               heartbeat_interval: float = DEFAULT_HEARTBEAT_SEC) -> None:
    """Blocking worker entry point."""
    Worker(address, slots, cpu_fraction, heartbeat_interval).run()
