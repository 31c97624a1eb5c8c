"""Cooperative per-evaluation deadlines.

Evaluation code calls :func:`check_deadline` between folds and node fits;
long-running kernels may call it from inside their loops.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager

from pipevo.errors import EvaluationTimeout

_local = threading.local()


@contextmanager
def deadline_scope(deadline: float | None):
    """Bind an absolute ``time.monotonic()`` deadline to the current thread."""
    previous = getattr(_local, "deadline", None)
    _local.deadline = deadline
    try:
        yield
    finally:
        _local.deadline = previous


def current_deadline() -> float | None:
    return getattr(_local, "deadline", None)


def check_deadline() -> None:
    deadline = current_deadline()
    if deadline is not None and time.monotonic() > deadline:
        raise EvaluationTimeout(f"deadline passed by {time.monotonic() - deadline:.3f}s")


def cooperative_sleep(seconds: float, step: float = 0.02) -> None:
    end = time.monotonic() + seconds
    while True:
        check_deadline()
        left = end - time.monotonic()
        if left <= 0:
            return
        time.sleep(min(step, left))
