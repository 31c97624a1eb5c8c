"""Client side of the coordinator protocol, with per-task stage timing.

Each task's client-observed end-to-end time splits into four stages:
``request`` (create round trip), ``queued`` and ``compute`` (as recorded by
the coordinator) and ``fetch`` (from noticing completion to a decoded
archive). The gap between completion and the client noticing it is kept
small by the blocking ``/tasks/wait`` call.
"""

from __future__ import annotations

import hashlib
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import requests

from pipevo.data import Dataset
from pipevo.errors import EndpointUnreachable, NotCompleted, RemoteError, UnknownDataset, UnknownTask
from pipevo.graph import PipelineGraph
from pipevo.remote.archive import decode_archive

POLL_INTERVAL_SEC = 0.5


@dataclass
class TaskStatus:
    task_id: str
    status: str
    queued: float | None = None
    compute: float | None = None
    failure_reason: str | None = None

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> TaskStatus:
        st = doc.get("stage_times") or {}
        return cls(doc["task_id"], doc["status"], st.get("queued"), st.get("compute"), doc.get("failure_reason"))

    @property
    def terminal(self) -> bool:
        return self.status in ("completed", "failed")


@dataclass
class FetchedResult:
    task_id: str
    archive: bytes
    metrics: dict[str, Any]
    pipeline: dict[str, Any] | None
    fetch_sec: float


@dataclass
class TaskTimeline:
    task_id: str
    status: str = "pending"  # completed | failed | timeout once finished
    fitness: float | None = None
    fold_scores: list[float] | None = None
    request: float = 0.0
    queued: float = 0.0
    compute: float = 0.0
    wait: float = 0.0
    fetch: float = 0.0
    end_to_end: float = 0.0
    reason: str | None = None
    metrics: dict[str, Any] = field(default_factory=dict)

    @property
    def stage_sum(self) -> float:
        return self.request + self.queued + self.compute + self.fetch


class RemoteClient:
    def __init__(self, endpoint: str, timeout: float = 60.0, poll_interval: float = POLL_INTERVAL_SEC,
                 long_poll: bool = True):
        self.endpoint = endpoint.rstrip("/")
        if "://" not in self.endpoint:
            self.endpoint = "http://" + self.endpoint
        self.timeout = timeout
        self.poll_interval = poll_interval
        self.long_poll = long_poll
        self.session = requests.Session()
        # one session per fetch thread
        self._fetch_local = threading.local()
        self._fetch_sessions: list[requests.Session] = []

    def close(self) -> None:
        self.session.close()
        for s in self._fetch_sessions:
            s.close()

    def __enter__(self) -> RemoteClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _request(self, method: str, path: str, session: requests.Session | None = None, **kwargs) -> requests.Response:
        try:
            return (session or self.session).request(method, self.endpoint + path,
                                                     timeout=kwargs.pop("timeout", self.timeout), **kwargs)
        except requests.RequestException as exc:
            raise EndpointUnreachable(f"{self.endpoint}: {exc}") from exc

    @staticmethod
    def _check(resp: requests.Response, task_id: str | None = None) -> requests.Response:
        if resp.status_code < 300:
            return resp
        try:
            message = resp.json().get("error", resp.text)
        except ValueError:
            message = resp.text
        if resp.status_code == 404 and "dataset" in message:
            raise UnknownDataset(message)
        if resp.status_code == 404 and task_id is not None:
            raise UnknownTask(message)
        if resp.status_code == 409:
            raise NotCompleted(message)
        raise RemoteError(f"HTTP {resp.status_code}: {message}")

    # -- protocol
    def healthz(self) -> None:
        self._check(self._request("GET", "/healthz", timeout=min(self.timeout, 5.0)))

    def register_dataset(self, dataset: Dataset, name: str | None = None) -> str:
        """Upload ``dataset``; the default name is a content hash."""
        csv = dataset.to_csv_text()
        name = name or "ds-" + hashlib.blake2b(csv.encode(), digest_size=8).hexdigest()
        self._check(self._request("POST", "/datasets", json={"name": name, "csv": csv,
                                                             "n_classes": dataset.n_classes}))
        return name

    @staticmethod
    def _task_doc(dataset_ref: str, limits: dict[str, Any] | None, score_only: bool, seed: int,
                  split_seed: int | None, cv_folds: int) -> dict[str, Any]:
        return {"dataset_ref": dataset_ref, "limits": dict(limits or {"cpu_fraction": 1.0}),
                "score_only": score_only, "seed": seed,
                "split_seed": seed if split_seed is None else split_seed, "cv_folds": cv_folds}

    def create_task(self, graph: PipelineGraph, dataset_ref: str, limits: dict[str, Any] | None = None,
                    score_only: bool = True, seed: int = 0, split_seed: int | None = None,
                    cv_folds: int = 5) -> str:
        doc = self._task_doc(dataset_ref, limits, score_only, seed, split_seed, cv_folds)
        doc["graph"] = graph.to_dict()
        return self._check(self._request("POST", "/tasks", json=doc)).json()["task_id"]

    def create_task_batch(self, graphs: Sequence[PipelineGraph], dataset_ref: str,
                          limits: dict[str, Any] | None = None, score_only: bool = True, seed: int = 0,
                          split_seed: int | None = None, cv_folds: int = 5) -> list[str]:
        doc = self._task_doc(dataset_ref, limits, score_only, seed, split_seed, cv_folds)
        doc["graphs"] = [g.to_dict() for g in graphs]
        return self._check(self._request("POST", "/tasks/batch", json=doc)).json()["task_ids"]

    def poll_status(self, task_id: str) -> TaskStatus:
        return TaskStatus.from_doc(self._check(self._request("GET", f"/tasks/{task_id}"), task_id).json())

    def list_tasks(self) -> list[TaskStatus]:
        return [TaskStatus.from_doc(d) for d in self._check(self._request("GET", "/tasks")).json()["tasks"]]

    def wait_any(self, task_ids: Sequence[str], timeout: float,
                 session: requests.Session | None = None) -> dict[str, TaskStatus]:
        """Statuses of the tasks among ``task_ids`` that are terminal, waiting up to ``timeout``."""
        if self.long_poll:
            resp = self._request("POST", "/tasks/wait", session=session,
                                 json={"task_ids": list(task_ids), "timeout": timeout}, timeout=timeout + self.timeout)
            return {k: TaskStatus.from_doc(v) for k, v in self._check(resp).json()["tasks"].items()}
        deadline = time.monotonic() + timeout
        while True:
            done = {}
            for tid in task_ids:
                st = TaskStatus.from_doc(self._check(self._request("GET", f"/tasks/{tid}", session=session), tid).json())
                if st.terminal:
                    done[tid] = st
            if done or time.monotonic() >= deadline:
                return done
            time.sleep(min(self.poll_interval, max(0.0, deadline - time.monotonic())))

    def fetch_result(self, task_id: str, session: requests.Session | None = None) -> FetchedResult:
        t0 = time.perf_counter()
        resp = self._check(self._request("GET", f"/tasks/{task_id}/result", session=session), task_id)
        metrics, pipeline = decode_archive(resp.content)
        return FetchedResult(task_id, resp.content, metrics, pipeline, time.perf_counter() - t0)

    def wait(self, task_id: str, timeout: float | None = None) -> TaskStatus:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            left = 5.0 if deadline is None else max(0.0, deadline - time.monotonic())
            done = self.wait_any([task_id], min(left, 5.0))
            if task_id in done:
                return done[task_id]
            if deadline is not None and time.monotonic() >= deadline:
                return self.poll_status(task_id)

    # -- whole populations
    def evaluate_population(self, graphs: Sequence[PipelineGraph], dataset_ref: str, seed: int = 0,
                            split_seed: int | None = None, cv_folds: int = 5, batch: bool = False,
                            score_only: bool = True, limit: float | None = None, cpu_fraction: float = 1.0,
                            fetch_workers: int = 4, deadline: float | None = None) -> list[TaskTimeline]:
        """Create, await and fetch one task per graph; timelines in input order.

        ``limit`` is the per-task compute limit enforced by the worker;
        ``deadline`` (a ``time.monotonic`` instant) bounds the whole wait,
        after which unfinished tasks are reported as ``timeout``. A waiter
        thread watches for completions while tasks are still being created.
        """
        limits: dict[str, Any] = {"cpu_fraction": cpu_fraction}
        if limit is not None:
            limits["time_sec"] = limit
        timelines: list[TaskTimeline] = []
        started: dict[str, float] = {}
        pending: set[str] = set()
        lock = threading.Lock()
        creating_done = threading.Event()
        futures: list[Future] = []
        waiter_error: list[BaseException] = []

        def fetch(tl: TaskTimeline, noticed: float) -> None:
            session = getattr(self._fetch_local, "session", None)
            if session is None:
                session = self._fetch_local.session = requests.Session()
                self._fetch_sessions.append(session)
            res = self.fetch_result(tl.task_id, session)
            done = time.perf_counter()
            tl.fetch = done - noticed
            tl.end_to_end = done - started[tl.task_id]
            tl.metrics = res.metrics
            tl.fitness = float(res.metrics["fitness"])
            tl.fold_scores = res.metrics.get("fold_scores")
            tl.status = "completed"

        def settle(tl: TaskTimeline, st: TaskStatus, noticed: float, pool: ThreadPoolExecutor) -> None:
            tl.queued = st.queued or 0.0
            tl.compute = st.compute or 0.0
            tl.wait = noticed - started[tl.task_id] - tl.request
            if st.status == "completed":
                futures.append(pool.submit(fetch, tl, noticed))
            else:
                reason = st.failure_reason or "failed"
                tl.status = "timeout" if reason.startswith("EvaluationTimeout") else "failed"
                tl.reason = reason
                tl.end_to_end = noticed - started[tl.task_id]

        def watch(pool: ThreadPoolExecutor) -> None:
            session = requests.Session()
            try:
                while True:
                    with lock:
                        ids = sorted(pending)
                    if not ids and creating_done.is_set():
                        return
                    # short waits while new tasks may still appear
                    timeout = 5.0 if creating_done.is_set() else 0.05
                    if deadline is not None:
                        timeout = min(timeout, deadline - time.monotonic())
                        if timeout <= 0:
                            return
                    if not ids:
                        time.sleep(0.002)
                        continue
                    done = self.wait_any(ids, timeout, session)
                    noticed = time.perf_counter()
                    with lock:
                        for tid, st in done.items():
                            pending.discard(tid)
                            settle(by_id[tid], st, noticed, pool)
            except BaseException as exc:  # noqa: BLE001 - re-raised by the caller
                waiter_error.append(exc)
            finally:
                session.close()

        by_id: dict[str, TaskTimeline] = {}
        with ThreadPoolExecutor(max_workers=max(1, fetch_workers), thread_name_prefix="fetch") as pool:
            waiter = threading.Thread(target=watch, args=(pool,), daemon=True, name="task-waiter")
            waiter.start()
            try:
                if batch:
                    t0 = time.perf_counter()
                    ids = self.create_task_batch(graphs, dataset_ref, limits, score_only, seed, split_seed,
                                                 cv_folds) if graphs else []
                    rtt = time.perf_counter() - t0
                    with lock:
                        for tid in ids:
                            started[tid] = t0
                            by_id[tid] = TaskTimeline(tid, request=rtt)
                            timelines.append(by_id[tid])
                            pending.add(tid)
                else:
                    for g in graphs:
                        t0 = time.perf_counter()
                        tid = self.create_task(g, dataset_ref, limits, score_only, seed, split_seed, cv_folds)
                        rtt = time.perf_counter() - t0
                        with lock:
                            started[tid] = t0
                            by_id[tid] = TaskTimeline(tid, request=rtt)
                            timelines.append(by_id[tid])
                            pending.add(tid)
            finally:
                creating_done.set()
                waiter.join()
            for f in list(futures):
                f.result()
        if waiter_error:
            raise waiter_error[0]
        now = time.perf_counter()
        for tid in pending:
            tl = by_id[tid]
            tl.status, tl.reason = "timeout", "not finished before the deadline"
            tl.end_to_end = now - started[tid]
        return timelines


# thin functional forms
def create_task(client: RemoteClient, graph: PipelineGraph, dataset_ref: str, limits: dict | None = None,
                score_only: bool = True, **kw) -> str:
    return client.create_task(graph, dataset_ref, limits, score_only, **kw)


def create_task_batch(client: RemoteClient, graphs: Sequence[PipelineGraph], dataset_ref: str,
                      limits: dict | None = None, score_only: bool = True, **kw) -> list[str]:
    return client.create_task_batch(graphs, dataset_ref, limits, score_only, **kw)


def poll_status(client: RemoteClient, task_id: str) -> TaskStatus:
    return client.poll_status(task_id)


def fetch_result(client: RemoteClient, task_id: str) -> FetchedResult:
    return client.fetch_result(task_id)
