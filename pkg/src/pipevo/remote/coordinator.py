"""HTTP coordinator: task table, dataset registry and worker bookkeeping.

Tasks move pending -> running -> completed | failed and are persisted in a
sqlite table, so a restarted coordinator still serves every terminal task.
Tasks that were pending or running when it stopped are failed with reason
``"coordinator restart"``.

Besides the client endpoints, workers use ``POST /workers/claim``,
``POST /workers/heartbeat``, ``POST /tasks/{id}/complete`` and
``POST /tasks/{id}/fail``. ``POST /tasks/wait`` lets a client block until
any of a set of tasks reaches a terminal state.
"""

from __future__ import annotations

import json
import logging
import re
import sqlite3
import threading
import time
import uuid
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any
from urllib.parse import parse_qs, urlsplit

from pipevo.graph import PipelineGraph

log = logging.getLogger(__name__)

PENDING, RUNNING, COMPLETED, FAILED = "pending", "running", "completed", "failed"
TERMINAL = frozenset({COMPLETED, FAILED})
DEFAULT_HEARTBEAT_SEC = 2.0
MISSED_HEARTBEATS = 3
MAX_WAIT_SEC = 30.0

_SCHEMA = """
CREATE TABLE IF NOT EXISTS tasks (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    task_id TEXT UNIQUE NOT NULL,
    body TEXT NOT NULL,
    status TEXT NOT NULL,
    created_at REAL NOT NULL,
    started_at REAL,
    finished_at REAL,
    worker_id TEXT,
    heartbeat_at REAL,
    failure_reason TEXT,
    result BLOB
);
CREATE TABLE IF NOT EXISTS datasets (name TEXT PRIMARY KEY, payload TEXT NOT NULL);
"""


class HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class TaskStore:
    """The persisted task table. Every method is atomic under one lock."""

    def __init__(self, path: str | Path = ":memory:", heartbeat_interval: float = DEFAULT_HEARTBEAT_SEC):
        self.heartbeat_interval = heartbeat_interval
        self.changed = threading.Condition()
        self._db = sqlite3.connect(str(path), check_same_thread=False, isolation_level=None)
        self._db.executescript(_SCHEMA)
        with self.changed:
            n = self._db.execute(
                "UPDATE tasks SET status=?, failure_reason=?, finished_at=? WHERE status IN (?, ?)",
                (FAILED, "coordinator restart", time.time(), PENDING, RUNNING)).rowcount
        if n:
            log.warning("marked %d unfinished tasks failed after restart", n)

    def close(self) -> None:
        with self.changed:
            self._db.close()

    # -- datasets
    def put_dataset(self, name: str, payload: dict[str, Any]) -> None:
        with self.changed:
            self._db.execute("INSERT OR REPLACE INTO datasets VALUES (?, ?)", (name, json.dumps(payload)))

    def get_dataset(self, name: str) -> dict[str, Any] | None:
        with self.changed:
            row = self._db.execute("SELECT payload FROM datasets WHERE name=?", (name,)).fetchone()
        return json.loads(row[0]) if row else None

    def has_dataset(self, name: str) -> bool:
        with self.changed:
            return self._db.execute("SELECT 1 FROM datasets WHERE name=?", (name,)).fetchone() is not None

    # -- tasks
    def create(self, bodies: list[dict[str, Any]]) -> list[str]:
        ids = [uuid.uuid4().hex for _ in bodies]
        now = time.time()
        with self.changed:
            self._db.execute("BEGIN")
            self._db.executemany("INSERT INTO tasks (task_id, body, status, created_at) VALUES (?, ?, ?, ?)",
                                 [(i, json.dumps(b), PENDING, now) for i, b in zip(ids, bodies)])
            self._db.execute("COMMIT")
            self.changed.notify_all()
        return ids

    def _status_doc(self, row) -> dict[str, Any]:
        task_id, status, created, started, finished, reason, worker = row
        doc = {
            "task_id": task_id,
            "status": status,
            "stage_times": {
                "queued": None if started is None else started - created,
                "compute": None if started is None or finished is None else finished - started,
            },
            "worker_id": worker,
        }
        if reason is not None:
            doc["failure_reason"] = reason
        return doc

    _STATUS_COLS = "task_id, status, created_at, started_at, finished_at, failure_reason, worker_id"

    def status(self, task_id: str) -> dict[str, Any] | None:
        with self.changed:
            row = self._db.execute(f"SELECT {self._STATUS_COLS} FROM tasks WHERE task_id=?", (task_id,)).fetchone()
        return self._status_doc(row) if row else None

    def listing(self) -> list[dict[str, Any]]:
        with self.changed:
            rows = self._db.execute(f"SELECT {self._STATUS_COLS} FROM tasks ORDER BY seq").fetchall()
        return [self._status_doc(r) for r in rows]

    def result(self, task_id: str) -> tuple[str, bytes | None] | None:
        with self.changed:
            row = self._db.execute("SELECT status, result FROM tasks WHERE task_id=?", (task_id,)).fetchone()
        return (row[0], row[1]) if row else None

    def wait_terminal(self, task_ids: list[str], timeout: float) -> dict[str, dict[str, Any]]:
        """Block until at least one of ``task_ids`` is terminal or ``timeout`` passes."""
        deadline = time.monotonic() + timeout
        marks = ",".join("?" * len(task_ids))
        with self.changed:
            while True:
                rows = self._db.execute(
                    f"SELECT {self._STATUS_COLS} FROM tasks WHERE task_id IN ({marks}) AND status IN (?, ?)",
                    (*task_ids, COMPLETED, FAILED)).fetchall() if task_ids else []
                remaining = deadline - time.monotonic()
                if rows or remaining <= 0:
                    return {r[0]: self._status_doc(r) for r in rows}
                self.changed.wait(remaining)

    def claim(self, worker_id: str, timeout: float) -> dict[str, Any] | None:
        deadline = time.monotonic() + timeout
        with self.changed:
            while True:
                row = self._db.execute("SELECT task_id, body FROM tasks WHERE status=? ORDER BY seq LIMIT 1",
                                       (PENDING,)).fetchone()
                if row is not None:
                    now = time.time()
                    self._db.execute("UPDATE tasks SET status=?, started_at=?, heartbeat_at=?, worker_id=? "
                                     "WHERE task_id=?", (RUNNING, now, now, worker_id, row[0]))
                    self.changed.notify_all()
                    return {"task_id": row[0], **json.loads(row[1])}
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self.changed.wait(remaining)

    def heartbeat(self, worker_id: str, task_ids: list[str]) -> int:
        if not task_ids:
            return 0
        marks = ",".join("?" * len(task_ids))
        with self.changed:
            return self._db.execute(
                f"UPDATE tasks SET heartbeat_at=? WHERE worker_id=? AND status=? AND task_id IN ({marks})",
                (time.time(), worker_id, RUNNING, *task_ids)).rowcount

    def finish(self, task_id: str, result: bytes | None = None, reason: str | None = None) -> bool:
        """Move a running task to completed (``result``) or failed (``reason``)."""
        status = COMPLETED if reason is None else FAILED
        with self.changed:
            n = self._db.execute("UPDATE tasks SET status=?, finished_at=?, result=?, failure_reason=? "
                                 "WHERE task_id=? AND status=?",
                                 (status, time.time(), result, reason, task_id, RUNNING)).rowcount
            if n:
                self.changed.notify_all()
        return bool(n)

    def expire_stale(self) -> int:
        cutoff = time.time() - MISSED_HEARTBEATS * self.heartbeat_interval
        with self.changed:
            n = self._db.execute("UPDATE tasks SET status=?, finished_at=?, failure_reason=? "
                                 "WHERE status=? AND heartbeat_at < ?",
                                 (FAILED, time.time(), "worker heartbeat lost", RUNNING, cutoff)).rowcount
            if n:
                self.changed.notify_all()
        return n


_ROUTES: list[tuple[str, re.Pattern, str]] = [
    (method, re.compile(f"^{pattern}$"), name)
    for method, pattern, name in [
        ("GET", r"/healthz", "healthz"),
        ("POST", r"/datasets", "post_dataset"),
        ("GET", r"/datasets/(?P<name>[^/]+)", "get_dataset"),
        ("GET", r"/tasks", "list_tasks"),
        ("POST", r"/tasks", "post_task"),
        ("POST", r"/tasks/batch", "post_batch"),
        ("POST", r"/tasks/wait", "wait_tasks"),
        ("GET", r"/tasks/(?P<task_id>[0-9a-f]+)", "get_task"),
        ("GET", r"/tasks/(?P<task_id>[0-9a-f]+)/result", "get_result"),
        ("POST", r"/tasks/(?P<task_id>[0-9a-f]+)/complete", "complete_task"),
        ("POST", r"/tasks/(?P<task_id>[0-9a-f]+)/fail", "fail_task"),
        ("POST", r"/workers/claim", "claim"),
        ("POST", r"/workers/heartbeat", "heartbeat"),
    ]
]


def _task_body(doc: dict[str, Any], graph: Any, store: TaskStore) -> dict[str, Any]:
    dataset_ref = doc.get("dataset_ref")
    if not isinstance(dataset_ref, str) or not store.has_dataset(dataset_ref):
        raise HttpError(HTTPStatus.NOT_FOUND, f"unknown dataset {dataset_ref!r}")
    try:
        PipelineGraph.from_dict(graph)
    except Exception as exc:  # noqa: BLE001 - any malformed graph is a client error
        raise HttpError(HTTPStatus.BAD_REQUEST, f"bad graph: {exc}") from exc
    limits = dict(doc.get("limits") or {})
    fraction = float(limits.get("cpu_fraction", 1.0))
    if not 0 < fraction <= 1:
        raise HttpError(HTTPStatus.BAD_REQUEST, "cpu_fraction must be in (0, 1]")
    limits["cpu_fraction"] = fraction
    return {
        "graph": graph,
        "dataset_ref": dataset_ref,
        "limits": limits,
        "score_only": bool(doc.get("score_only", True)),
        "seed": int(doc.get("seed", 0)),
        "split_seed": int(doc.get("split_seed", doc.get("seed", 0))),
        "cv_folds": int(doc.get("cv_folds", 5)),
    }


class Coordinator:
    """Threaded HTTP server around a :class:`TaskStore`.

    ``port=0`` picks a free port; read it back from :attr:`address`.
    """

    def __init__(self, db_path: str | Path = ":memory:", host: str = "127.0.0.1", port: int = 0,
                 heartbeat_interval: float = DEFAULT_HEARTBEAT_SEC):
        self.store = TaskStore(db_path, heartbeat_interval)
        self.server = ThreadingHTTPServer((host, port), self._handler_class())
        self.server.daemon_threads = True
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> Coordinator:
        self._threads = [
            threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.1}, daemon=True,
                             name="coordinator-http"),
            threading.Thread(target=self._monitor, daemon=True, name="coordinator-monitor"),
        ]
        for t in self._threads:
            t.start()
        return self

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.wait(0.5):
                pass
        finally:
            self.stop()

    def stop(self) -> None:
        self._stop.set()
        self.server.shutdown()
        self.server.server_close()
        for t in self._threads:
            t.join(timeout=5)
        self.store.close()

    def __enter__(self) -> Coordinator:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _monitor(self) -> None:
        while not self._stop.wait(self.store.heartbeat_interval / 2):
            try:
                n = self.store.expire_stale()
            except sqlite3.ProgrammingError:
                return
            if n:
                log.warning("%d task(s) failed after missed heartbeats", n)

    # -- request handling
    def dispatch(self, method: str, path: str, query: dict[str, list[str]], body: bytes) -> tuple[int, Any]:
        for m, pattern, name in _ROUTES:
            match = pattern.match(path)
            if m == method and match:
                return getattr(self, f"_h_{name}")(body=body, query=query, **match.groupdict())
        raise HttpError(HTTPStatus.NOT_FOUND, f"no route for {method} {path}")

    @staticmethod
    def _json(body: bytes) -> dict[str, Any]:
        try:
            doc = json.loads(body or b"{}")
        except ValueError as exc:
            raise HttpError(HTTPStatus.BAD_REQUEST, f"invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise HttpError(HTTPStatus.BAD_REQUEST, "expected a JSON object")
        return doc

    def _h_healthz(self, **_):
        return HTTPStatus.OK, {"status": "ok"}

    def _h_post_dataset(self, body, **_):
        doc = self._json(body)
        if not isinstance(doc.get("name"), str) or not isinstance(doc.get("csv"), str):
            raise HttpError(HTTPStatus.BAD_REQUEST, "dataset needs name and csv")
        self.store.put_dataset(doc["name"], {k: doc[k] for k in ("name", "csv", "n_classes") if k in doc})
        return HTTPStatus.CREATED, {"name": doc["name"]}

    def _h_get_dataset(self, name, **_):
        payload = self.store.get_dataset(name)
        if payload is None:
            raise HttpError(HTTPStatus.NOT_FOUND, f"unknown dataset {name!r}")
        return HTTPStatus.OK, payload

    def _h_list_tasks(self, **_):
        return HTTPStatus.OK, {"tasks": self.store.listing()}

    def _h_post_task(self, body, **_):
        doc = self._json(body)
        task = _task_body(doc, doc.get("graph"), self.store)
        return HTTPStatus.CREATED, {"task_id": self.store.create([task])[0]}

    def _h_post_batch(self, body, **_):
        doc = self._json(body)
        graphs = doc.get("graphs")
        if not isinstance(graphs, list):
            raise HttpError(HTTPStatus.BAD_REQUEST, "graphs must be a list")
        if not graphs:
            return HTTPStatus.CREATED, {"task_ids": []}
        tasks = [_task_body(doc, g, self.store) for g in graphs]
        return HTTPStatus.CREATED, {"task_ids": self.store.create(tasks)}

    def _h_wait_tasks(self, body, **_):
        doc = self._json(body)
        ids = [str(i) for i in doc.get("task_ids", [])]
        timeout = min(float(doc.get("timeout", 1.0)), MAX_WAIT_SEC)
        return HTTPStatus.OK, {"tasks": self.store.wait_terminal(ids, timeout)}

    def _h_get_task(self, task_id, **_):
        doc = self.store.status(task_id)
        if doc is None:
            raise HttpError(HTTPStatus.NOT_FOUND, f"unknown task {task_id}")
        return HTTPStatus.OK, doc

    def _h_get_result(self, task_id, **_):
        found = self.store.result(task_id)
        if found is None:
            raise HttpError(HTTPStatus.NOT_FOUND, f"unknown task {task_id}")
        status, blob = found
        if status != COMPLETED:
            raise HttpError(HTTPStatus.CONFLICT, f"task {task_id} is {status}")
        return HTTPStatus.OK, bytes(blob)

    def _h_complete_task(self, task_id, body, **_):
        if not self.store.finish(task_id, result=body):
            raise HttpError(HTTPStatus.CONFLICT, f"task {task_id} is not running")
        return HTTPStatus.OK, {"status": COMPLETED}

    def _h_fail_task(self, task_id, body, **_):
        reason = str(self._json(body).get("reason") or "unspecified failure")
        if not self.store.finish(task_id, reason=reason):
            raise HttpError(HTTPStatus.CONFLICT, f"task {task_id} is not running")
        return HTTPStatus.OK, {"status": FAILED}

    def _h_claim(self, body, **_):
        doc = self._json(body)
        task = self.store.claim(str(doc.get("worker_id", "anonymous")),
                                min(float(doc.get("wait", 0.0)), MAX_WAIT_SEC))
        if task is None:
            return HTTPStatus.NO_CONTENT, None
        return HTTPStatus.OK, task

    def _h_heartbeat(self, body, **_):
        doc = self._json(body)
        n = self.store.heartbeat(str(doc.get("worker_id")), [str(i) for i in doc.get("task_ids", [])])
        return HTTPStatus.OK, {"updated": n}

    def _handler_class(self):
        coordinator = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def _serve(self, method: str) -> None:
                url = urlsplit(self.path)
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                try:
                    status, payload = coordinator.dispatch(method, url.path, parse_qs(url.query), body)
                except HttpError as exc:
                    status, payload = exc.status, {"error": str(exc)}
                except Exception as exc:  # noqa: BLE001 - report, keep serving
                    log.exception("request failed")
                    status, payload = HTTPStatus.INTERNAL_SERVER_ERROR, {"error": repr(exc)}
                if payload is None:
                    data, ctype = b"", "application/json"
                elif isinstance(payload, bytes):
                    data, ctype = payload, "application/zip"
                else:
                    data, ctype = json.dumps(payload).encode(), "application/json"
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                if data:
                    self.wfile.write(data)

            def do_GET(self):
                self._serve("GET")

            def do_POST(self):
                self._serve("POST")

            def log_message(self, fmt, *args):
                log.debug("%s " + fmt, self.address_string(), *args)

        return Handler
