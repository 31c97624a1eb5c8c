"""Numpy kernels for the registered models and transforms.

Every ``fit_*`` returns a flat ``dict[str, np.ndarray]`` of learned state and
every ``predict_*`` consumes it. Kernels are deterministic for a given seed.
"""

from __future__ import annotations

import math

import numpy as np

from pipevo.deadline import check_deadline, cooperative_sleep
from pipevo.errors import DegenerateInput

State = dict[str, np.ndarray]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _renormalize(p: np.ndarray) -> np.ndarray:
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- transforms

def fit_scaling(X, y, hp, seed, n_classes) -> State:
    std = X.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return {"mean": X.mean(axis=0), "std": std}


def predict_scaling(state: State, X):
    return (X - state["mean"]) / state["std"]


def fit_normalization(X, y, hp, seed, n_classes) -> State:
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    return {"min": lo, "span": np.where(span == 0.0, 1.0, span)}


def predict_normalization(state: State, X):
    return (X - state["min"]) / state["span"]


def fit_poly(X, y, hp, seed, n_classes) -> State:
    return {"n_features": np.array(X.shape[1], dtype=np.int64)}


def predict_poly(state: State, X):
    c = X.shape[1]
    i, j = np.triu_indices(c)
    return np.hstack([X, X[:, i] * X[:, j]])


def fit_pca(X, y, hp, seed, n_classes) -> State:
    if np.any(X.std(axis=0) == 0.0):
        raise DegenerateInput("pca input has a zero-variance column")
    k = min(int(hp["n_components"]), X.shape[1])
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:k]
    # sign convention: largest-magnitude loading of each component is positive
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    return {"mean": mean, "components": comps * signs[:, None]}


def predict_pca(state: State, X):
    return (X - state["mean"]) @ state["components"].T


def fit_sleep(X, y, hp, seed, n_classes) -> State:
    cooperative_sleep(float(hp["seconds"]))
    return {"n_features": np.array(X.shape[1], dtype=np.int64)}


def predict_sleep(state: State, X):
    return X


# -------------------------------------------------------------------- models

def constant_state(y, n_classes) -> State:
    probs = np.bincount(y, minlength=n_classes).astype(np.float64)
    return {"constant": probs / probs.sum()}


def fit_bernoulli_nb(X, y, hp, seed, n_classes) -> State:
    alpha = float(hp["alpha"])
    Xb = (X > float(hp["binarize"])).astype(np.float64)
    onehot = np.eye(n_classes)[y]
    class_count = onehot.sum(axis=0)
    feature_count = onehot.T @ Xb
    p_one = (feature_count + alpha) / (class_count[:, None] + 2.0 * alpha)
    with np.errstate(divide="ignore"):
        log_prior = np.log(class_count / class_count.sum())
    return {"log_prior": log_prior, "p_one": p_one, "threshold": np.array(float(hp["binarize"]))}


def predict_bernoulli_nb(state: State, X):
    Xb = (X > state["threshold"]).astype(np.float64)
    p = state["p_one"]
    joint = Xb @ np.log(p).T + (1.0 - Xb) @ np.log1p(-p).T + state["log_prior"]
    return softmax(joint)


def fit_logit(X, y, hp, seed, n_classes) -> State:
    lr = float(hp["lr"])
    iters = int(hp["iters"])
    n, c = X.shape
    W = np.zeros((c, n_classes))
    b = np.zeros(n_classes)
    target = np.eye(n_classes)[y]
    for it in range(iters):
        if it % 50 == 0:
            check_deadline()
        grad = (softmax(X @ W + b) - target) / n
        W -= lr * (X.T @ grad)
        b -= lr * grad.sum(axis=0)
    return {"W": W, "b": b}


def predict_logit(state: State, X):
    return softmax(X @ state["W"] + state["b"])


def _best_split(Xn, yn, n_classes, features):
    """Best (feature, threshold) by weighted gini, or None if no split helps."""
    n = len(yn)
    onehot = np.eye(n_classes)[yn]
    total = onehot.sum(axis=0)
    parent = 1.0 - np.sum((total / n) ** 2)
    best = (parent - 1e-12, None, None)
    for f in features:
        xs = Xn[:, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        left = np.cumsum(onehot[order], axis=0)[:-1]
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        nl = np.arange(1, n, dtype=np.float64)
        nr = n - nl
        right = total - left
        gl = 1.0 - np.sum((left / nl[:, None]) ** 2, axis=1)
        gr = 1.0 - np.sum((right / nr[:, None]) ** 2, axis=1)
        score = np.where(valid, (nl * gl + nr * gr) / n, np.inf)
        i = int(np.argmin(score))
        if score[i] < best[0]:
            a, b = xs[i], xs[i + 1]
            thr = (a + b) / 2.0
            if not a <= thr < b:
                thr = a
            best = (score[i], f, thr)
    return None if best[1] is None else (best[1], best[2])


def grow_tree(X, y, n_classes, max_depth, min_samples_split, max_features=None, rng=None) -> State:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        value.append(counts / counts.sum())
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    n_features = X.shape[1]
    while stack:
        node, idx, depth = stack.pop()
        check_deadline()
        yn = y[idx]
        if depth >= max_depth or len(idx) < min_samples_split or np.all(yn == yn[0]):
            continue
        if max_features is not None and max_features < n_features:
            features = np.sort(rng.choice(n_features, size=max_features, replace=False))
        else:
            features = range(n_features)
        split = _best_split(X[idx], yn, n_classes, features)
        if split is None:
            continue
        f, thr = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = int(f), float(thr)
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return {
        "feature": np.array(feature, dtype=np.int64),
        "threshold": np.array(threshold, dtype=np.float64),
        "left": np.array(left, dtype=np.int64),
        "right": np.array(right, dtype=np.int64),
        "value": np.array(value, dtype=np.float64),
    }


def apply_tree(tree: State, X) -> np.ndarray:
    """Leaf value rows for each sample."""
    feature, threshold = tree["feature"], tree["threshold"]
    left, right = tree["left"], tree["right"]
    node = np.zeros(len(X), dtype=np.int64)
    rows = np.arange(len(X))
    while True:
        f = feature[node]
        internal = f >= 0
        if not internal.any():
            break
        r = rows[internal]
        cur = node[internal]
        go_left = X[r, f[internal]] <= threshold[cur]
        node[internal] = np.where(go_left, left[cur], right[cur])
    return tree["value"][node]


def fit_dt(X, y, hp, seed, n_classes) -> State:
    return grow_tree(X, y, n_classes, int(hp["max_depth"]), int(hp["min_samples_split"]))


def predict_dt(state: State, X):
    return _renormalize(apply_tree(state, X))


def fit_rf_lite(X, y, hp, seed, n_classes) -> State:
    rng = np.random.default_rng(seed)
    n = len(y)
    max_features = max(1, math.isqrt(X.shape[1]))
    trees = []
    for _ in range(int(hp["n_trees"])):
        boot = rng.integers(0, n, size=n)
        trees.append(grow_tree(X[boot], y[boot], n_classes, int(hp["max_depth"]), 2, max_features, rng))
    sizes = np.array([len(t["feature"]) for t in trees], dtype=np.int64)
    packed = {k: np.concatenate([t[k] for t in trees]) for k in ("feature", "threshold", "value")}
    # child indices stay tree-local
    packed["left"] = np.concatenate([t["left"] for t in trees])
    packed["right"] = np.concatenate([t["right"] for t in trees])
    packed["sizes"] = sizes
    return packed


def predict_rf_lite(state: State, X):
    offsets = np.concatenate([[0], np.cumsum(state["sizes"])[:-1]])
    total = np.zeros((len(X), state["value"].shape[1]))
    for off, size in zip(offsets, state["sizes"]):
        sl = slice(off, off + size)
        tree = {k: state[k][sl] for k in ("feature", "threshold", "left", "right")}
        tree["value"] = state["value"][sl]
        total += apply_tree(tree, X)
    return _renormalize(total / len(offsets))


def fit_knn(X, y, hp, seed, n_classes) -> State:
    return {"X": X.copy(), "y": y.astype(np.int64), "k": np.array(int(hp["k"]), dtype=np.int64),
            "n_classes": np.array(n_classes, dtype=np.int64)}


def predict_knn(state: State, X, chunk: int = 512):
    Xt, yt = state["X"], state["y"]
    k = min(int(state["k"]), len(yt))
    n_classes = int(state["n_classes"])
    sq_train = np.einsum("ij,ij->i", Xt, Xt)
    out = np.empty((len(X), n_classes))
    for start in range(0, len(X), chunk):
        check_deadline()
        block = X[start:start + chunk]
        d = sq_train[None, :] - 2.0 * block @ Xt.T + np.einsum("ij,ij->i", block, block)[:, None]
        if k < len(yt):
            nearest = np.argpartition(d, k - 1, axis=1)[:, :k]
        else:
            nearest = np.broadcast_to(np.arange(len(yt)), (len(block), len(yt)))
        votes = np.zeros((len(block), n_classes))
        np.add.at(votes, (np.repeat(np.arange(len(block)), k), yt[nearest].ravel()), 1.0)
        out[start:start + chunk] = votes / k
    return out
