"""Simulated pipeline fit times on mixed baseline/accelerated hardware.

Nothing is fitted here: each node costs its backend's resource-profile
estimate, and every edge that crosses between backends pays for moving the
data (``TRANSFER_PER_ELEMENT_SEC`` per element). The raw data lives on the
host, so an accelerated source node pays to receive it and an accelerated
sink pays to send its predictions back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from pipevo.dispatcher import assign_backends
from pipevo.graph import Binding, OperationSpec, PipelineGraph, PipelineNode, topological_order
from pipevo.operations import REGISTRY, OperationRegistry
from pipevo.operations.registry import TRANSFER_PER_ELEMENT_SEC

MODES = ("baseline", "hetero", "scheduled")


def single_model_pipeline() -> PipelineGraph:
    return PipelineGraph.chain("rf_lite")


def composite_pipeline() -> PipelineGraph:
    """scaling feeding rf_lite and knn, whose outputs feed a logit."""
    return PipelineGraph([
        PipelineNode("n0", OperationSpec("scaling")),
        PipelineNode("n1", OperationSpec("rf_lite"), ("n0",)),
        PipelineNode("n2", OperationSpec("knn"), ("n0",)),
        PipelineNode("n3", OperationSpec("logit"), ("n1", "n2")),
    ])


def bind(graph: PipelineGraph, mode: str, rows: int, cols: int, n_classes: int = 2,
         registry: OperationRegistry = REGISTRY) -> PipelineGraph:
    """``baseline``: everything on the CPU path. ``hetero``: every node that
    has an accelerated implementation uses it. ``scheduled``: the per-node
    argmin of the cost model."""
    if mode == "baseline":
        return graph.with_bindings({nid: Binding.BASELINE for nid in graph.nodes})
    if mode == "hetero":
        return graph.with_bindings({
            nid: Binding.ACCELERATED if Binding.ACCELERATED in registry.get(graph[nid].spec.name).backends
            else Binding.BASELINE for nid in graph.nodes
        })
    if mode == "scheduled":
        return assign_backends(graph, {Binding.BASELINE, Binding.ACCELERATED}, (rows, cols), n_classes, registry)
    raise ValueError(f"unknown binding mode {mode!r}")


@dataclass
class SimulatedTime:
    compute: float
    transfer: float

    @property
    def total(self) -> float:
        return self.compute + self.transfer


def simulate_fit_time(graph: PipelineGraph, rows: int, cols: int, n_classes: int = 2,
                      registry: OperationRegistry = REGISTRY) -> SimulatedTime:
    """Simulated fit time of a bound graph on ``rows x cols`` data."""
    width_in: dict[str, int] = {}
    width_out: dict[str, int] = {}
    compute, transfer = [], []
    for nid in topological_order(graph):
        node = graph[nid]
        backend = Binding.BASELINE if node.binding is Binding.UNBOUND else node.binding
        preds = node.predecessors
        width_in[nid] = cols if not preds else sum(width_out[p] for p in preds)
        width_out[nid] = registry.output_width(node.spec, width_in[nid], n_classes)
        compute.append(registry.estimate_fit_time(node.spec, backend, rows, width_in[nid]))
        if not preds and backend is Binding.ACCELERATED:
            transfer.append(rows * cols * TRANSFER_PER_ELEMENT_SEC)
        for p in preds:
            if graph[p].binding != node.binding:
                transfer.append(rows * width_out[p] * TRANSFER_PER_ELEMENT_SEC)
    if graph[graph.root].binding is Binding.ACCELERATED:
        transfer.append(rows * width_out[graph.root] * TRANSFER_PER_ELEMENT_SEC)
    return SimulatedTime(math.fsum(compute), math.fsum(transfer))


def improvement_pct(t_baseline: float, t_other: float) -> float:
    return (1.0 - t_other / t_baseline) * 100.0


def format_improvement(pct: float) -> str:
    """Improvement column text; ``-`` when the alternative is not faster."""
    return "-" if pct <= 0 else f"{pct:.1f}"
