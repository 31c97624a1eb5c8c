"""Independent reference implementations used as test oracles.

These deliberately share no code with the package: they work from plain
dicts/lists and use the most direct (often exponential) formulation.
"""

from __future__ import annotations

import itertools
import math
import random
from fractions import Fraction


def render(value) -> str:
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def descriptor(nodes: dict, nid: str) -> str:
    """Recursive builder over ``{id: (op, hparams, preds)}``."""
    op, hparams, preds = nodes[nid]
    inner = sorted(descriptor(nodes, p) for p in preds)
    head = "(" + ";".join(inner) + ")" if inner else ""
    params = ",".join(f"{k}={render(hparams[k])}" for k in sorted(hparams))
    return head + "/" + op + "_{" + params + "}"


def auc_pairs(y, scores) -> float:
    """O(n^2) Mann-Whitney: wins + half ties over all positive/negative pairs."""
    pos = [s for t, s in zip(y, scores) if t == 1]
    neg = [s for t, s in zip(y, scores) if t == 0]
    total = Fraction(0)
    for p in pos:
        for q in neg:
            total += 1 if p > q else Fraction(1, 2) if p == q else 0
    return float(total / (len(pos) * len(neg)))


def makespan_bruteforce(times, workers: int) -> float:
    """Minimum over every job-to-worker assignment of the busiest worker's load."""
    if not times:
        return 0.0
    best = math.inf
    for assignment in itertools.product(range(workers), repeat=len(times)):
        loads = [[] for _ in range(workers)]
        for t, w in zip(times, assignment):
            loads[w].append(t)
        best = min(best, max(math.fsum(l) for l in loads))
    return best


def kahn_sorted(nodes: dict) -> list[str]:
    """Topological order taking the smallest available id each step."""
    indeg = {n: len(nodes[n][2]) for n in nodes}
    order = []
    while len(order) < len(nodes):
        ready = sorted(n for n, d in indeg.items() if d == 0 and n not in order)
        if not ready:
            raise ValueError("cycle")
        nxt = ready[0]
        order.append(nxt)
        for n in nodes:
            indeg[n] -= nodes[n][2].count(nxt)
    return order


OPS = {
    "model": ["logit", "dt", "knn", "bernoulli_nb", "rf_lite"],
    "transform": ["scaling", "normalization", "poly", "pca"],
}
PARAMS = {
    "logit": {"lr": [0.05, 0.1, 0.3], "iters": [50, 100]},
    "dt": {"max_depth": [2, 3, 5]},
    "knn": {"k": [1, 3, 7]},
    "bernoulli_nb": {"alpha": [0.5, 1.0]},
    "rf_lite": {"n_trees": [3, 5], "max_depth": [3]},
    "pca": {"n_components": [1, 2]},
}


def random_dag(rng: random.Random, max_nodes: int = 10, model_sink: bool = True,
               transforms_only_inside: bool = False) -> dict:
    """Random single-sink DAG as ``{id: (op, hparams, preds)}``.

    Node ``n0`` is the sink; every other node feeds some lower-numbered node,
    so the result is acyclic and connected toward the sink.
    """
    n = rng.randint(1, max_nodes)
    nodes = {}
    for i in range(n):
        kind = "model" if (i == 0 and model_sink) else rng.choice(["transform", "transform", "model"])
        if transforms_only_inside and i > 0:
            kind = "transform"
        op = rng.choice(OPS[kind])
        space = PARAMS.get(op, {})
        hp = {k: rng.choice(v) for k, v in space.items() if rng.random() < 0.4}
        nodes[f"n{i}"] = [op, hp, []]
    for i in range(1, n):
        targets = rng.sample(range(i), k=min(i, rng.choice([1, 1, 1, 2])))
        for t in targets:
            nodes[f"n{t}"][2].append(f"n{i}")
    return {k: (v[0], v[1], list(v[2])) for k, v in nodes.items()}
