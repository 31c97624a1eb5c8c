"""Pipeline graph genotype: nodes, validation, ordering and structural keys."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping

DEFAULT_MAX_PIPELINE_SIZE = 15

Scalar = int | float | bool | str


class GraphError(Exception):
    """Base class for structural graph errors."""


class UnknownNode(GraphError, KeyError):
    pass


class CyclicGraph(GraphError):
    pass


class Binding(str, Enum):
    BASELINE = "baseline"
    ACCELERATED = "accelerated"
    UNBOUND = "unbound"


def render_scalar(value: Scalar) -> str:
    """Render a hyperparameter value in its canonical text form.

    Floats use the shortest decimal that round-trips (``repr``), integers
    are rendered without a decimal point and booleans as ``true``/``false``.
    """
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite hyperparameter value {value!r}")
        return repr(value)
    return str(value)


def canonical_hyperparams(hyperparams: Mapping[str, Scalar]) -> str:
    return "{" + ",".join(f"{k}={render_scalar(hyperparams[k])}" for k in sorted(hyperparams)) + "}"


@dataclass(frozen=True)
class OperationSpec:
    name: str
    hyperparams: Mapping[str, Scalar] = field(default_factory=dict)

    def __post_init__(self):
        # lexicographic key order keeps serialization deterministic
        object.__setattr__(self, "hyperparams", {k: self.hyperparams[k] for k in sorted(self.hyperparams)})

    def __hash__(self):
        return hash((self.name, tuple(self.hyperparams.items())))

    @property
    def label(self) -> str:
        return f"{self.name}_{canonical_hyperparams(self.hyperparams)}"

    def with_params(self, **updates: Scalar) -> OperationSpec:
        return OperationSpec(self.name, {**self.hyperparams, **updates})


@dataclass(frozen=True)
class PipelineNode:
    id: str
    spec: OperationSpec
    predecessors: tuple[str, ...] = ()
    binding: Binding = Binding.UNBOUND

    def __post_init__(self):
        object.__setattr__(self, "predecessors", tuple(self.predecessors))
        object.__setattr__(self, "binding", Binding(self.binding))


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str]

    def __bool__(self) -> bool:
        return self.ok


class PipelineGraph:
    """Immutable DAG of operation nodes with a single sink (the root)."""

    __slots__ = ("_nodes", "_successors", "_descriptors")

    def __init__(self, nodes: Iterable[PipelineNode]):
        table: dict[str, PipelineNode] = {}
        for node in nodes:
            if node.id in table:
                raise GraphError(f"duplicate node id {node.id!r}")
            table[node.id] = node
        self._nodes = table
        succ: dict[str, list[str]] = {nid: [] for nid in table}
        for node in table.values():
            for p in node.predecessors:
                if p in succ:
                    succ[p].append(node.id)
        self._successors = {k: tuple(sorted(v)) for k, v in succ.items()}
        self._descriptors: dict[str, str] = {}

    @property
    def nodes(self) -> Mapping[str, PipelineNode]:
        return self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self):
        return iter(self._nodes.values())

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._nodes

    def __getitem__(self, node_id: str) -> PipelineNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PipelineGraph) and self._nodes == other._nodes

    def __hash__(self) -> int:
        return hash(tuple(sorted(self._nodes.items())))

    def __repr__(self) -> str:
        root = self.sinks()
        return f"PipelineGraph({self.descriptor(root[0]) if len(root) == 1 else list(self._nodes)!r})"

    def successors(self, node_id: str) -> tuple[str, ...]:
        return self._successors[node_id]

    def sinks(self) -> list[str]:
        return sorted(nid for nid, s in self._successors.items() if not s)

    @property
    def root(self) -> str:
        sinks = self.sinks()
        if len(sinks) != 1:
            raise GraphError(f"graph has {len(sinks)} sinks, expected exactly one")
        return sinks[0]

    def descriptor(self, node_id: str | None = None) -> str:
        return structural_descriptor(self, self.root if node_id is None else node_id)

    def ancestors(self, node_id: str) -> set[str]:
        """All nodes with a path into ``node_id`` (the node itself excluded)."""
        seen: set[str] = set()
        stack = list(self[node_id].predecessors)
        while stack:
            nid = stack.pop()
            if nid in seen or nid not in self._nodes:
                continue
            seen.add(nid)
            stack.extend(self._nodes[nid].predecessors)
        return seen

    def with_bindings(self, bindings: Mapping[str, Binding | str]) -> PipelineGraph:
        return PipelineGraph(
            replace(n, binding=Binding(bindings.get(n.id, n.binding))) for n in self._nodes.values()
        )

    def to_dict(self) -> dict[str, Any]:
        out = []
        for nid in sorted(self._nodes):
            n = self._nodes[nid]
            item: dict[str, Any] = {
                "id": n.id,
                "op": n.spec.name,
                "hparams": dict(n.spec.hyperparams),
                "preds": list(n.predecessors),
            }
            if n.binding is not Binding.UNBOUND:
                item["binding"] = n.binding.value
            out.append(item)
        return {"nodes": out}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> PipelineGraph:
        return cls(
            PipelineNode(
                id=str(item["id"]),
                spec=OperationSpec(item["op"], dict(item.get("hparams", {}))),
                predecessors=tuple(str(p) for p in item.get("preds", ())),
                binding=Binding(item.get("binding", "unbound")),
            )
            for item in doc["nodes"]
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> PipelineGraph:
        return cls.from_dict(json.loads(text))

    @classmethod
    def chain(cls, *specs: OperationSpec | str) -> PipelineGraph:
        """Linear pipeline ``specs[0] -> specs[1] -> ...`` with ids n0, n1, ..."""
        nodes = []
        for i, s in enumerate(specs):
            spec = OperationSpec(s) if isinstance(s, str) else s
            nodes.append(PipelineNode(f"n{i}", spec, (f"n{i - 1}",) if i else ()))
        return cls(nodes)


def topological_order(graph: PipelineGraph) -> list[str]:
    """Kahn's algorithm with a sorted frontier; ties go to the smaller node id."""
    indegree = {nid: 0 for nid in graph.nodes}
    for node in graph:
        for p in node.predecessors:
            if p in graph.nodes:
                indegree[node.id] += 1
    frontier = [nid for nid, d in indegree.items() if d == 0]
    heapq.heapify(frontier)
    order = []
    while frontier:
        nid = heapq.heappop(frontier)
        order.append(nid)
        for s in graph.successors(nid):
            indegree[s] -= 1
            if indegree[s] == 0:
                heapq.heappush(frontier, s)
    if len(order) != len(graph):
        stuck = sorted(nid for nid, d in indegree.items() if d > 0)
        raise CyclicGraph(f"cycle through nodes {stuck}")
    return order


def validate_graph(
    graph: PipelineGraph,
    max_pipeline_size: int = DEFAULT_MAX_PIPELINE_SIZE,
    known_operations: Iterable[str] | None = None,
) -> ValidationReport:
    violations: list[str] = []
    if len(graph) == 0:
        return ValidationReport(False, ["empty graph"])
    for node in graph:
        preds = node.predecessors
        if node.id in preds:
            violations.append(f"self-reference at {node.id}")
        if len(set(preds)) != len(preds):
            violations.append(f"duplicate predecessors at {node.id}")
        missing = [p for p in preds if p not in graph]
        if missing:
            violations.append(f"unknown predecessors {missing} at {node.id}")
    if known_operations is not None:
        known = set(known_operations)
        bad = sorted(n.id for n in graph if n.spec.name not in known)
        if bad:
            violations.append(f"unregistered operation at {bad}")
    try:
        topological_order(graph)
        acyclic = True
    except CyclicGraph as exc:
        violations.append(f"cycle: {exc}")
        acyclic = False
    sinks = graph.sinks()
    if len(sinks) > 1:
        violations.append(f"multiple sinks {sinks}")
    elif not sinks:
        violations.append("no sink")
    elif acyclic:
        feeding = graph.ancestors(sinks[0]) | {sinks[0]}
        cut_off = sorted(set(graph.nodes) - feeding)
        if cut_off:
            violations.append(f"nodes not connected to sink {cut_off}")
    if len(graph) > max_pipeline_size:
        violations.append(f"size {len(graph)} exceeds max_pipeline_size {max_pipeline_size}")
    return ValidationReport(not violations, violations)


def structural_descriptor(graph: PipelineGraph, node_id: str) -> str:
    """Recursive key text of the subgraph feeding into ``node_id``.

    ``(<pred_1>;<pred_2>;...)/<name>_<hparams>`` with predecessor keys
    sorted lexicographically, or just ``/<name>_<hparams>`` for a source.
    """
    memo = graph._descriptors
    if node_id in memo:
        return memo[node_id]
    node = graph[node_id]
    # iterative post-order keeps deep chains clear of the recursion limit
    stack = [(node_id, False)]
    on_path: set[str] = set()
    while stack:
        nid, expanded = stack.pop()
        if nid in memo:
            continue
        cur = graph[nid]
        if not expanded:
            if nid in on_path:
                raise CyclicGraph(f"cycle through {nid}")
            on_path.add(nid)
            stack.append((nid, True))
            for p in cur.predecessors:
                if p not in memo:
                    if p in on_path:
                        raise CyclicGraph(f"cycle through {p}")
                    stack.append((p, False))
            continue
        on_path.discard(nid)
        parts = sorted(memo[p] for p in cur.predecessors)
        prefix = "(" + ";".join(parts) + ")" if parts else ""
        memo[nid] = f"{prefix}/{cur.spec.label}"
    return memo[node.id]
