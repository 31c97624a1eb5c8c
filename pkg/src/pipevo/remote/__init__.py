"""Coordinator/worker remote evaluation over HTTP."""

from pipevo.remote.archive import decode_archive, encode_archive
from pipevo.remote.client import (
    FetchedResult,
    RemoteClient,
    TaskStatus,
    TaskTimeline,
    create_task,
    create_task_batch,
    fetch_result,
    poll_status,
)
from pipevo.remote.coordinator import Coordinator, TaskStore
from pipevo.remote.worker import Worker, run_worker

__all__ = [
    "Coordinator",
    "FetchedResult",
    "RemoteClient",
    "TaskStatus",
    "TaskStore",
    "TaskTimeline",
    "Worker",
    "create_task",
    "create_task_batch",
    "decode_archive",
    "encode_archive",
    "fetch_result",
    "poll_status",
    "run_worker",
]
