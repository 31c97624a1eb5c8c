"""Graph mutation and crossover operators plus initial population growth."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from pipevo.graph import DEFAULT_MAX_PIPELINE_SIZE, OperationSpec, PipelineGraph, PipelineNode, validate_graph
from pipevo.individual import Individual, OptimizerConfig, Population
from pipevo.operations import REGISTRY, OperationRegistry

MUTATIONS = ("add_node", "remove_node", "replace_operation", "tweak_hyperparam", "add_edge")
MAX_RETRIES = 10


def is_acceptable(graph: PipelineGraph, registry: OperationRegistry, max_size: int) -> bool:
    if not validate_graph(graph, max_size, known_operations=registry._ops).ok:
        return False
    return registry.get(graph[graph.root].spec.name).kind == "model"


def _fresh_id(taken) -> str:
    k = len(taken)
    while f"n{k}" in taken:
        k += 1
    return f"n{k}"


def _pick(rng: np.random.Generator, items):
    items = list(items)
    return items[int(rng.integers(len(items)))]


def random_spec(rng: np.random.Generator, registry: OperationRegistry, kind: str | None = None,
                sample_params: float = 0.3) -> OperationSpec:
    name = _pick(rng, registry.names(kind))
    params = {}
    space = registry.get(name).hyperparam_space
    if space and rng.random() < sample_params:
        key = _pick(rng, sorted(space))
        params[key] = space[key].sample(rng)
    return OperationSpec(name, params)


def _rebuild(nodes: dict[str, PipelineNode]) -> PipelineGraph:
    return PipelineGraph(nodes.values())


def _add_node(graph, rng, registry):
    nodes = dict(graph.nodes)
    target = nodes[_pick(rng, sorted(nodes))]
    new = PipelineNode(_fresh_id(nodes), random_spec(rng, registry), target.predecessors)
    nodes[new.id] = new
    nodes[target.id] = replace(target, predecessors=(new.id,))
    return _rebuild(nodes)


def _remove_node(graph, rng, registry):
    candidates = [nid for nid in sorted(graph.nodes) if graph.successors(nid)]
    if not candidates:
        return None
    victim = graph[_pick(rng, candidates)]
    nodes = dict(graph.nodes)
    del nodes[victim.id]
    for succ in graph.successors(victim.id):
        preds = []
        for p in nodes[succ].predecessors:
            for q in ((p,) if p != victim.id else victim.predecessors):
                if q not in preds:
                    preds.append(q)
        nodes[succ] = replace(nodes[succ], predecessors=tuple(preds))
    return _rebuild(nodes)


def _replace_operation(graph, rng, registry):
    node = graph[_pick(rng, sorted(graph.nodes))]
    kind = registry.get(node.spec.name).kind
    choices = [n for n in registry.names(kind) if n != node.spec.name]
    if not choices:
        return None
    nodes = dict(graph.nodes)
    nodes[node.id] = replace(node, spec=OperationSpec(_pick(rng, choices)))
    return _rebuild(nodes)


def _tweak_hyperparam(graph, rng, registry):
    tunable = [nid for nid in sorted(graph.nodes) if registry.get(graph[nid].spec.name).hyperparam_space]
    if not tunable:
        return None
    node = graph[_pick(rng, tunable)]
    space = registry.get(node.spec.name).hyperparam_space
    key = _pick(rng, sorted(space))
    nodes = dict(graph.nodes)
    nodes[node.id] = replace(node, spec=node.spec.with_params(**{key: space[key].sample(rng)}))
    return _rebuild(nodes)


def _add_edge(graph, rng, registry):
    ids = sorted(graph.nodes)
    if len(ids) < 2:
        return None
    src, dst = _pick(rng, ids), _pick(rng, ids)
    if src == dst or src in graph[dst].predecessors or dst in graph.ancestors(src):
        return None
    nodes = dict(graph.nodes)
    nodes[dst] = replace(nodes[dst], predecessors=nodes[dst].predecessors + (src,))
    return _rebuild(nodes)


_OPERATORS = {
    "add_node": _add_node,
    "remove_node": _remove_node,
    "replace_operation": _replace_operation,
    "tweak_hyperparam": _tweak_hyperparam,
    "add_edge": _add_edge,
}


def mutate(ind: Individual, rng: np.random.Generator, registry: OperationRegistry = REGISTRY,
           max_pipeline_size: int = DEFAULT_MAX_PIPELINE_SIZE, kind: str | None = None) -> Individual:
    """One random structural or parametric edit.

    ``kind`` pins the mutation type; otherwise it is drawn uniformly. After
    ``MAX_RETRIES`` failed attempts the parent graph is returned unchanged.
    """
    for _ in range(MAX_RETRIES):
        op = kind or _pick(rng, MUTATIONS)
        child = _OPERATORS[op](ind.graph, rng, registry)
        if child is not None and is_acceptable(child, registry, max_pipeline_size):
            return Individual(child, parents=(ind.id,), operator=op)
    return Individual(ind.graph, parents=(ind.id,), operator="unchanged")


def _copy_cone(source: PipelineGraph, top: str, taken: set[str]) -> tuple[dict[str, PipelineNode], str]:
    cone = sorted(source.ancestors(top) | {top})
    mapping = {}
    for nid in cone:
        mapping[nid] = _fresh_id(taken)
        taken.add(mapping[nid])
    copied = {
        mapping[nid]: PipelineNode(mapping[nid], source[nid].spec, tuple(mapping[p] for p in source[nid].predecessors))
        for nid in cone
    }
    return copied, mapping[top]


def _graft(host: PipelineGraph, point: str, donor: PipelineGraph, donor_point: str) -> PipelineGraph:
    """Replace the cone above ``point`` in ``host`` with a copy of the donor's cone."""
    nodes = dict(host.nodes)
    copied, new_top = _copy_cone(donor, donor_point, set(nodes))
    nodes.update(copied)
    for succ in host.successors(point):
        nodes[succ] = replace(nodes[succ], predecessors=tuple(new_top if p == point else p
                                                              for p in nodes[succ].predecessors))
    # drop whatever no longer feeds the sink
    graph = _rebuild(nodes)
    keep = graph.ancestors(host.root) | {host.root}
    return _rebuild({k: v for k, v in nodes.items() if k in keep})


def crossover_points(graph: PipelineGraph) -> list[str]:
    return [nid for nid in sorted(graph.nodes) if graph.successors(nid)]


def crossover(a: Individual, b: Individual, rng: np.random.Generator, registry: OperationRegistry = REGISTRY,
              max_pipeline_size: int = DEFAULT_MAX_PIPELINE_SIZE) -> tuple[Individual, Individual]:
    """Swap a non-sink node and its ancestor cone between two graphs."""
    pa, pb = crossover_points(a.graph), crossover_points(b.graph)
    parents = (a.id, b.id)
    if pa and pb:
        for _ in range(MAX_RETRIES):
            xa, xb = _pick(rng, pa), _pick(rng, pb)
            ca = _graft(a.graph, xa, b.graph, xb)
            cb = _graft(b.graph, xb, a.graph, xa)
            if is_acceptable(ca, registry, max_pipeline_size) and is_acceptable(cb, registry, max_pipeline_size):
                return (Individual(ca, parents=parents, operator="crossover"),
                        Individual(cb, parents=parents, operator="crossover"))
    return (Individual(a.graph, parents=parents, operator="unchanged"),
            Individual(b.graph, parents=parents, operator="unchanged"))


def random_graph(rng: np.random.Generator, registry: OperationRegistry = REGISTRY,
                 max_pipeline_size: int = DEFAULT_MAX_PIPELINE_SIZE, size: int | None = None) -> PipelineGraph:
    """A model sink grown to ``size`` nodes by inserting predecessors and branches."""
    size = size or int(rng.integers(2, 5))
    graph = PipelineGraph([PipelineNode("n0", random_spec(rng, registry, "model"))])
    for _ in range(10 * size):
        if len(graph) >= size:
            break
        nodes = dict(graph.nodes)
        target = nodes[_pick(rng, sorted(nodes))]
        new = PipelineNode(_fresh_id(nodes), random_spec(rng, registry))
        if target.predecessors and rng.random() < 0.3:
            # extra branch into the target
            nodes[target.id] = replace(target, predecessors=target.predecessors + (new.id,))
        else:
            new = replace(new, predecessors=target.predecessors)
            nodes[target.id] = replace(target, predecessors=(new.id,))
        nodes[new.id] = new
        candidate = _rebuild(nodes)
        if is_acceptable(candidate, registry, max_pipeline_size):
            graph = candidate
    return graph


def initial_population(config: OptimizerConfig, registry: OperationRegistry = REGISTRY,
                       rng: np.random.Generator | None = None) -> Population:
    """Half single-model pipelines, half grown 2-4 node pipelines."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    individuals = []
    models = registry.names("model")
    for i in range(config.population_size):
        if i % 2 == 0:
            graph = PipelineGraph([PipelineNode("n0", OperationSpec(models[(i // 2) % len(models)]))])
        else:
            graph = random_graph(rng, registry, config.max_pipeline_size)
        individuals.append(Individual(graph, id=f"g0-{i}", generation=0))
    return Population(0, individuals)
