"""Fold-aware node cache backed by a single sqlite file.

Keys are ``"<fold_id>|<structural descriptor>"``; values are serialized
:class:`~pipevo.operations.FittedOperation` blobs. Writes are batched into one
transaction with insert-or-ignore semantics, so concurrent writers computing
the same key never clobber each other and readers see whole batches.
"""

from __future__ import annotations

import hashlib
import os
import sqlite3
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from pipevo.errors import BlobFormatError, CorruptCacheFile
from pipevo.graph import Binding, PipelineGraph, topological_order
from pipevo.operations import REGISTRY, FittedOperation, OperationRegistry

CACHE_MAGIC = "pipevo-node-cache"
CACHE_VERSION = "1"
NO_FOLD = -1
_SQLITE_HEADER = b"SQLite format 3\x00"
_BATCH = 500


class CacheMode(str, Enum):
    CREATE = "create"
    OPEN_EXISTING = "open_existing"


@dataclass(frozen=True, order=True)
class CacheKey:
    fold_id: int
    descriptor: str

    def render(self) -> str:
        return f"{self.fold_id}|{self.descriptor}"

    @classmethod
    def parse(cls, text: str) -> CacheKey:
        fold, sep, descriptor = text.partition("|")
        if not sep:
            raise ValueError(f"not a cache key: {text!r}")
        return cls(int(fold), descriptor)

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class CacheEntry:
    key: CacheKey
    blob: bytes
    created_at: int = 0


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    inserts: int = 0
    ignored_duplicate_inserts: int = 0

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    def __add__(self, other: CacheStats) -> CacheStats:
        return CacheStats(
            self.hits + other.hits,
            self.misses + other.misses,
            self.inserts + other.inserts,
            self.ignored_duplicate_inserts + other.ignored_duplicate_inserts,
        )

    def as_dict(self) -> dict[str, int]:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "inserts": self.inserts,
            "ignored_duplicate_inserts": self.ignored_duplicate_inserts,
        }


def _check_file(path: Path, locked: bool = False) -> None:
    """Reject files that are not a complete cache database.

    The sqlite header records the page size and the page count; after a
    clean commit the file is exactly ``page_size * page_count`` bytes, so
    any truncation shows up as a size mismatch. Sizes are only comparable
    while holding a read lock (``locked``), since a writer may be mid-commit.
    """
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            header = fh.read(100)
    except OSError as exc:
        raise CorruptCacheFile(f"{path}: {exc}") from exc
    if len(header) < 100 or not header.startswith(_SQLITE_HEADER):
        raise CorruptCacheFile(f"{path}: not a cache file")
    (page_size,) = struct.unpack(">H", header[16:18])
    page_size = 65536 if page_size == 1 else page_size
    (page_count,) = struct.unpack(">I", header[28:32])
    if page_count and size < page_size * page_count and locked:
        raise CorruptCacheFile(f"{path}: truncated ({size} of {page_size * page_count} bytes)")


class CacheHandle:
    """Concurrency-safe handle on one cache file.

    Each thread gets its own sqlite connection; any number of processes may
    open the same file with ``open_existing``.
    """

    def __init__(self, path: str | os.PathLike, mode: CacheMode | str = CacheMode.CREATE, busy_timeout: float = 60.0):
        self.path = Path(path)
        self.mode = CacheMode(mode)
        self._busy_timeout = busy_timeout
        self._local = threading.local()
        self._lock = threading.Lock()
        self._connections: list[sqlite3.Connection] = []
        self._stats = CacheStats()
        self._closed = False
        if self.mode is CacheMode.CREATE:
            for stale in (self.path, self.path.with_name(self.path.name + "-journal")):
                if stale.exists():
                    stale.unlink()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            conn = self._conn()
            conn.execute("BEGIN IMMEDIATE")
            conn.execute("CREATE TABLE meta (k TEXT PRIMARY KEY, v TEXT NOT NULL)")
            conn.execute("CREATE TABLE entries (key TEXT PRIMARY KEY, blob BLOB NOT NULL)")
            conn.executemany("INSERT INTO meta VALUES (?, ?)", [("magic", CACHE_MAGIC), ("version", CACHE_VERSION)])
            conn.execute("COMMIT")
        else:
            if not self.path.exists():
                raise FileNotFoundError(self.path)
            _check_file(self.path)
            try:
                conn = self._conn()
                # the shared lock keeps writers from extending the file mid-check
                conn.execute("BEGIN")
                conn.execute("SELECT COUNT(*) FROM sqlite_master").fetchone()
                try:
                    _check_file(self.path, locked=True)
                    meta = dict(conn.execute("SELECT k, v FROM meta").fetchall())
                    ok = conn.execute("PRAGMA quick_check").fetchone()[0]
                finally:
                    conn.execute("COMMIT")
            except CorruptCacheFile:
                self.close()
                raise
            except sqlite3.DatabaseError as exc:
                self.close()
                raise CorruptCacheFile(f"{self.path}: {exc}") from exc
            if meta.get("magic") != CACHE_MAGIC or meta.get("version") != CACHE_VERSION or ok != "ok":
                self.close()
                raise CorruptCacheFile(f"{self.path}: magic/version/integrity check failed")

    def _conn(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            if self._closed:
                raise sqlite3.ProgrammingError("cache handle is closed")
            conn = sqlite3.connect(self.path, timeout=self._busy_timeout, isolation_level=None,
                                   check_same_thread=False)
            conn.execute(f"PRAGMA busy_timeout = {int(self._busy_timeout * 1000)}")
            self._local.conn = conn
            with self._lock:
                self._connections.append(conn)
        return conn

    @property
    def stats(self) -> CacheStats:
        with self._lock:
            return CacheStats(**self._stats.as_dict())

    def _bump(self, **delta: int) -> None:
        with self._lock:
            for k, v in delta.items():
                setattr(self._stats, k, getattr(self._stats, k) + v)

    def _select(self, rendered: list[str]) -> dict[str, tuple[bytes, int]]:
        conn = self._conn()
        found: dict[str, tuple[bytes, int]] = {}
        # one read transaction so the batch sees a single snapshot
        conn.execute("BEGIN")
        try:
            for start in range(0, len(rendered), _BATCH):
                chunk = rendered[start:start + _BATCH]
                marks = ",".join("?" * len(chunk))
                for key, data, rowid in conn.execute(
                    f"SELECT key, blob, rowid FROM entries WHERE key IN ({marks})", chunk
                ):
                    found[key] = (bytes(data), rowid)
        finally:
            conn.execute("COMMIT")
        return found

    def get_many(self, keys: Iterable[CacheKey]) -> dict[CacheKey, CacheEntry]:
        keys = list(dict.fromkeys(keys))
        if not keys:
            return {}
        found = self._select([k.render() for k in keys])
        out = {k: CacheEntry(k, *found[k.render()]) for k in keys if k.render() in found}
        self._bump(hits=len(out), misses=len(keys) - len(out))
        return out

    def contains_many(self, keys: Iterable[CacheKey]) -> set[CacheKey]:
        """Existence check that leaves the hit/miss counters untouched."""
        keys = list(dict.fromkeys(keys))
        if not keys:
            return set()
        conn = self._conn()
        present: set[str] = set()
        rendered = [k.render() for k in keys]
        for start in range(0, len(rendered), _BATCH):
            chunk = rendered[start:start + _BATCH]
            marks = ",".join("?" * len(chunk))
            present.update(r[0] for r in conn.execute(f"SELECT key FROM entries WHERE key IN ({marks})", chunk))
        return {k for k in keys if k.render() in present}

    def put_many(self, entries: Iterable[CacheEntry]) -> int:
        rows = [(e.key.render(), e.blob) for e in entries]
        if not rows:
            return 0
        conn = self._conn()
        conn.execute("BEGIN IMMEDIATE")
        try:
            before = conn.total_changes
            conn.executemany("INSERT OR IGNORE INTO entries (key, blob) VALUES (?, ?)", rows)
            inserted = conn.total_changes - before
            conn.execute("COMMIT")
        except BaseException:
            conn.execute("ROLLBACK")
            raise
        self._bump(inserts=inserted, ignored_duplicate_inserts=len(rows) - inserted)
        return inserted

    def __len__(self) -> int:
        return self._conn().execute("SELECT COUNT(*) FROM entries").fetchone()[0]

    def keys(self) -> list[CacheKey]:
        return [CacheKey.parse(r[0]) for r in self._conn().execute("SELECT key FROM entries ORDER BY rowid")]

    def close(self) -> None:
        with self._lock:
            conns, self._connections = self._connections, []
            self._closed = True
        for conn in conns:
            conn.close()
        self._local = threading.local()

    def __enter__(self) -> CacheHandle:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __getstate__(self):
        raise TypeError("CacheHandle cannot be pickled; reopen the file with open_cache(path, 'open_existing')")


def open_cache(path: str | os.PathLike, mode: CacheMode | str = CacheMode.CREATE) -> CacheHandle:
    return CacheHandle(path, mode)


# ------------------------------------------------------------ graph fitting

def derive_seed(base_seed: int, descriptor: str) -> int:
    """Per-node fit seed that depends only on the run seed and the node's key."""
    digest = hashlib.blake2b(f"{base_seed}:{descriptor}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


@dataclass
class FittedPipeline:
    graph: PipelineGraph
    nodes: dict[str, FittedOperation]
    fold_id: int
    stats: CacheStats = field(default_factory=CacheStats)
    fitted_now: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def input_order(self, node_id: str) -> list[str]:
        return ordered_predecessors(self.graph, node_id)

    def predict(self, X: np.ndarray, registry: OperationRegistry = REGISTRY) -> np.ndarray:
        return predict_graph(self.graph, self.nodes, X, registry)


def ordered_predecessors(graph: PipelineGraph, node_id: str) -> list[str]:
    # same order as the descriptor so the stacked input is key-consistent
    return sorted(graph[node_id].predecessors, key=lambda p: (graph.descriptor(p), p))


def predict_graph(graph: PipelineGraph, fitted: Mapping[str, FittedOperation], X: np.ndarray,
                  registry: OperationRegistry = REGISTRY) -> np.ndarray:
    outputs: dict[str, np.ndarray] = {}
    for nid in topological_order(graph):
        preds = ordered_predecessors(graph, nid)
        X_in = X if not preds else np.hstack([outputs[p] for p in preds])
        outputs[nid] = registry.predict_operation(fitted[nid], X_in)
    return outputs[graph.root]


def fit_graph_with_cache(
    graph: PipelineGraph,
    X: np.ndarray,
    y: np.ndarray,
    fold_id: int,
    handle: CacheHandle | None,
    seed: int = 0,
    n_classes: int | None = None,
    registry: OperationRegistry = REGISTRY,
    check: Callable[[], None] | None = None,
) -> FittedPipeline:
    """Fit every node of ``graph``, reusing cached nodes where possible.

    All node keys are looked up in one batch; missing nodes are fitted in
    topological order on the outputs of their (possibly cached) predecessors
    and written back in one batch. ``handle=None`` fits everything.
    ``check`` is called between node fits (deadline hook).
    """
    order = topological_order(graph)
    n_classes = int(n_classes if n_classes is not None else int(np.max(y)) + 1)
    keys = {nid: CacheKey(fold_id, graph.descriptor(nid)) for nid in order}
    timings = {"cache_load": 0.0, "fit": 0.0, "cache_save": 0.0}

    t0 = time.perf_counter()
    found = handle.get_many(set(keys.values())) if handle is not None else {}
    timings["cache_load"] = time.perf_counter() - t0
    # counted per node: structurally identical nodes share one key
    hit_nodes = sum(k in found for k in keys.values())
    stats = CacheStats(hits=hit_nodes, misses=len(keys) - hit_nodes) if handle is not None else CacheStats()

    fitted: dict[str, FittedOperation] = {}
    for nid in order:
        entry = found.get(keys[nid])
        if entry is not None:
            try:
                fitted[nid] = FittedOperation.from_bytes(entry.blob)
            except BlobFormatError:
                # stale registry version; refit
                del found[keys[nid]]

    train_out: dict[str, np.ndarray] = {}

    def output_on_train(nid: str) -> np.ndarray:
        if nid not in train_out:
            train_out[nid] = registry.predict_operation(fitted[nid], input_on_train(nid))
        return train_out[nid]

    def input_on_train(nid: str) -> np.ndarray:
        preds = ordered_predecessors(graph, nid)
        return X if not preds else np.hstack([output_on_train(p) for p in preds])

    staged: list[CacheEntry] = []
    fitted_now: list[str] = []
    t0 = time.perf_counter()
    for nid in order:
        if nid in fitted:
            continue
        twin = next((o for o in fitted_now if keys[o] == keys[nid]), None)
        if twin is not None:
            fitted[nid] = fitted[twin]
            continue
        if check is not None:
            check()
        node = graph[nid]
        backend = Binding.BASELINE if node.binding is Binding.UNBOUND else node.binding
        op = registry.fit_operation(node.spec, backend, input_on_train(nid), y, derive_seed(seed, keys[nid].descriptor),
                                    n_classes)
        fitted[nid] = op
        fitted_now.append(nid)
        if handle is not None:
            staged.append(CacheEntry(keys[nid], op.to_bytes()))
    timings["fit"] = time.perf_counter() - t0

    if staged:
        t0 = time.perf_counter()
        inserted = handle.put_many(staged)
        timings["cache_save"] = time.perf_counter() - t0
        stats.inserts = inserted
        stats.ignored_duplicate_inserts = len(staged) - inserted
    return FittedPipeline(graph, fitted, fold_id, stats, fitted_now, timings)
