from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pipevo.data import synth_blobs, synth_moons  # noqa: E402
from pipevo.graph import OperationSpec, PipelineGraph, PipelineNode  # noqa: E402


def graph_from_nodes(nodes: dict) -> PipelineGraph:
    return PipelineGraph(PipelineNode(nid, OperationSpec(op, hp), tuple(preds)) for nid, (op, hp, preds) in nodes.items())


@pytest.fixture(scope="session")
def moons():
    return synth_moons(200, 0.15, 0)


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(300, 4, 0)


@pytest.fixture
def cache_path(tmp_path):
    return tmp_path / "cache.sqlite"


def pytest_configure(config):
    os.environ.setdefault("MPLBACKEND", "Agg")
