"""Operation descriptors, backend implementations and their cost models.

An operation (``logit``, ``scaling``...) is the abstract modelling step a
graph node names. Each operation owns one or more implementations, one per
backend. The ``accelerated`` backend is simulated: it runs the same numpy
kernel as ``baseline`` and differs only in its :class:`ResourceProfile`,
which is what the scheduler and the timing reports consume.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from pipevo.errors import DegenerateInput, ShapeMismatch, UnknownBackend, UnknownOperation
from pipevo.graph import Binding, OperationSpec, Scalar
from pipevo.operations import blob, kernels

Backend = Binding
BACKENDS = (Binding.BASELINE, Binding.ACCELERATED)

# seconds per element moved between a baseline node and an accelerated node
TRANSFER_PER_ELEMENT_SEC = 2e-8


@dataclass(frozen=True)
class ResourceProfile:
    fixed_overhead_sec: float
    per_element_sec: float

    def __post_init__(self):
        if self.fixed_overhead_sec < 0 or self.per_element_sec < 0:
            raise ValueError("resource profile terms must be non-negative")

    def estimate(self, rows: int, cols: int) -> float:
        return self.fixed_overhead_sec + self.per_element_sec * rows * cols


@dataclass(frozen=True)
class HyperParam:
    kind: str  # int | float | bool | choice
    default: Scalar
    low: float | None = None
    high: float | None = None
    choices: tuple[Scalar, ...] = ()

    def __post_init__(self):
        if not self.contains(self.default):
            raise ValueError(f"default {self.default!r} outside declared range")

    def contains(self, value: Scalar) -> bool:
        if self.kind == "bool":
            return isinstance(value, bool)
        if self.kind == "choice":
            return value in self.choices
        return self.low <= value <= self.high

    def sample(self, rng: np.random.Generator) -> Scalar:
        if self.kind == "int":
            return int(rng.integers(int(self.low), int(self.high) + 1))
        if self.kind == "float":
            # log-uniform for positive ranges spanning decades
            if self.low > 0 and self.high / self.low >= 100:
                v = float(np.exp(rng.uniform(np.log(self.low), np.log(self.high))))
            else:
                v = float(rng.uniform(self.low, self.high))
            return float(f"{v:.3g}")
        if self.kind == "bool":
            return bool(rng.integers(2))
        return self.choices[int(rng.integers(len(self.choices)))]


@dataclass(frozen=True)
class ImplementationDescriptor:
    backend: Binding
    cost_model: ResourceProfile


@dataclass(frozen=True)
class OperationDescriptor:
    name: str
    kind: str  # model | transform
    hyperparam_space: Mapping[str, HyperParam]
    implementations: Mapping[Binding, ImplementationDescriptor]
    fit_fn: Callable = field(repr=False, compare=False)
    predict_fn: Callable = field(repr=False, compare=False)
    searchable: bool = True

    def __post_init__(self):
        if Binding.BASELINE not in self.implementations:
            raise ValueError(f"{self.name}: every operation needs a baseline implementation")

    def __hash__(self):
        return hash(self.name)

    @property
    def backends(self) -> frozenset[Binding]:
        return frozenset(self.implementations)

    def resolved_params(self, spec: OperationSpec) -> dict[str, Scalar]:
        unknown = set(spec.hyperparams) - set(self.hyperparam_space)
        if unknown:
            raise UnknownOperation(f"{self.name} has no hyperparameters {sorted(unknown)}")
        params = {k: hp.default for k, hp in self.hyperparam_space.items()}
        params.update(spec.hyperparams)
        return params


@dataclass
class FittedOperation:
    spec: OperationSpec
    backend: Binding
    params: dict[str, np.ndarray]
    n_features_in: int
    n_classes: int
    kind: str
    fit_wall_time_sec: float = 0.0
    simulated_time_sec: float | None = None

    def to_bytes(self) -> bytes:
        header = {
            "op": self.spec.name,
            "hparams": dict(self.spec.hyperparams),
            "backend": self.backend.value,
            "kind": self.kind,
            "n_features_in": self.n_features_in,
            "n_classes": self.n_classes,
        }
        return blob.dumps(header, self.params)

    @classmethod
    def from_bytes(cls, data: bytes) -> FittedOperation:
        header, params = blob.loads(data)
        return cls(
            spec=OperationSpec(header["op"], header["hparams"]),
            backend=Binding(header["backend"]),
            params=params,
            n_features_in=int(header["n_features_in"]),
            n_classes=int(header["n_classes"]),
            kind=header["kind"],
        )


class OperationRegistry:
    def __init__(self, descriptors: list[OperationDescriptor] = ()):
        self._ops: dict[str, OperationDescriptor] = {}
        for d in descriptors:
            self.register(d)

    def register(self, descriptor: OperationDescriptor) -> None:
        self._ops[descriptor.name] = descriptor

    def __contains__(self, name: object) -> bool:
        return name in self._ops

    def get(self, name: str) -> OperationDescriptor:
        try:
            return self._ops[name]
        except KeyError:
            raise UnknownOperation(name) from None

    def list_operations(self) -> set[OperationDescriptor]:
        return {d for d in self._ops.values() if d.searchable}

    def names(self, kind: str | None = None) -> list[str]:
        return sorted(d.name for d in self.list_operations() if kind is None or d.kind == kind)

    def implementation(self, name: str, backend: Binding | str) -> ImplementationDescriptor:
        desc = self.get(name)
        try:
            return desc.implementations[Binding(backend)]
        except (KeyError, ValueError):
            raise UnknownBackend(f"{name} has no {backend} implementation") from None

    def estimate_fit_time(self, spec: OperationSpec, backend: Binding | str, rows: int, cols: int) -> float:
        return self.implementation(spec.name, backend).cost_model.estimate(rows, cols)

    def output_width(self, spec: OperationSpec, in_cols: int, n_classes: int) -> int:
        desc = self.get(spec.name)
        if desc.kind == "model":
            return n_classes
        if spec.name == "poly":
            return in_cols + in_cols * (in_cols + 1) // 2
        if spec.name == "pca":
            return min(int(desc.resolved_params(spec)["n_components"]), in_cols)
        return in_cols

    def fit_operation(
        self,
        spec: OperationSpec,
        backend: Binding | str,
        X: np.ndarray,
        y: np.ndarray | None,
        seed: int,
        n_classes: int | None = None,
    ) -> FittedOperation:
        desc = self.get(spec.name)
        impl = self.implementation(spec.name, backend)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ShapeMismatch(f"expected a nonempty 2-d matrix, got shape {X.shape}")
        if y is not None:
            y = np.asarray(y, dtype=np.int64)
            if len(y) != len(X):
                raise ShapeMismatch(f"{len(X)} rows but {len(y)} labels")
        if desc.kind == "model" and y is None:
            raise ShapeMismatch(f"{spec.name} needs labels")
        if n_classes is None:
            n_classes = int(y.max()) + 1 if y is not None else 0
        hp = desc.resolved_params(spec)
        start = time.perf_counter()
        if desc.kind == "model" and len(np.unique(y)) < 2:
            params = kernels.constant_state(y, n_classes)
        else:
            params = desc.fit_fn(X, y, hp, seed, n_classes)
        elapsed = time.perf_counter() - start
        simulated = impl.cost_model.estimate(*X.shape) if impl.backend is Binding.ACCELERATED else None
        return FittedOperation(
            spec=spec,
            backend=impl.backend,
            params=params,
            n_features_in=X.shape[1],
            n_classes=n_classes,
            kind=desc.kind,
            fit_wall_time_sec=elapsed,
            simulated_time_sec=simulated,
        )

    def predict_operation(self, fitted: FittedOperation, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != fitted.n_features_in:
            raise ShapeMismatch(f"fitted on {fitted.n_features_in} columns, got shape {X.shape}")
        if "constant" in fitted.params:
            return np.tile(fitted.params["constant"], (len(X), 1))
        return self.get(fitted.spec.name).predict_fn(fitted.params, X)


def _impls(baseline: tuple[float, float], accelerated: tuple[float, float] | None = None):
    out = {Binding.BASELINE: ImplementationDescriptor(Binding.BASELINE, ResourceProfile(*baseline))}
    if accelerated is not None:
        out[Binding.ACCELERATED] = ImplementationDescriptor(Binding.ACCELERATED, ResourceProfile(*accelerated))
    return out


def _op(name, kind, space, impls, searchable=True) -> OperationDescriptor:
    return OperationDescriptor(
        name=name,
        kind=kind,
        hyperparam_space=space,
        implementations=impls,
        fit_fn=getattr(kernels, f"fit_{name}"),
        predict_fn=getattr(kernels, f"predict_{name}"),
        searchable=searchable,
    )


# Accelerated profiles carry a large fixed launch/transfer overhead and a small
# per-element cost: slower than baseline below ~1.2e5 training elements,
# more than 5x faster from 1e6 elements up.
DEFAULT_OPERATIONS = [
    _op("bernoulli_nb", "model",
        {"alpha": HyperParam("float", 1.0, 0.01, 10.0), "binarize": HyperParam("float", 0.0, -1.0, 1.0)},
        _impls((0.002, 5e-8))),
    _op("logit", "model",
        {"lr": HyperParam("float", 0.1, 0.001, 1.0), "iters": HyperParam("int", 200, 10, 500)},
        _impls((0.01, 2e-6), (0.2, 1e-7))),
    _op("dt", "model",
        {"max_depth": HyperParam("int", 5, 1, 10), "min_samples_split": HyperParam("int", 2, 2, 20)},
        _impls((0.01, 4e-6))),
    _op("knn", "model",
        {"k": HyperParam("int", 5, 1, 25)},
        _impls((0.005, 5e-6), (0.5, 2e-7))),
    _op("rf_lite", "model",
        {"n_trees": HyperParam("int", 10, 2, 20), "max_depth": HyperParam("int", 6, 2, 10)},
        _impls((0.01, 2.5e-5), (3.0, 4e-7))),
    _op("scaling", "transform", {}, _impls((0.001, 2e-8))),
    _op("normalization", "transform", {}, _impls((0.001, 2e-8))),
    _op("poly", "transform", {}, _impls((0.002, 1e-7))),
    _op("pca", "transform", {"n_components": HyperParam("int", 2, 1, 5)}, _impls((0.005, 2e-7))),
    # test-only: identity transform that sleeps cooperatively during fit
    _op("sleep", "transform", {"seconds": HyperParam("float", 1.0, 0.0, 3600.0)},
        _impls((0.0, 0.0)), searchable=False),
]

REGISTRY = OperationRegistry(DEFAULT_OPERATIONS)


def list_operations() -> set[OperationDescriptor]:
    return REGISTRY.list_operations()


def fit_operation(spec, backend, X, y, seed, n_classes=None) -> FittedOperation:
    return REGISTRY.fit_operation(spec, backend, X, y, seed, n_classes)


def predict_operation(fitted: FittedOperation, X) -> np.ndarray:
    return REGISTRY.predict_operation(fitted, X)


def estimate_fit_time(spec: OperationSpec, backend, rows: int, cols: int) -> float:
    return REGISTRY.estimate_fit_time(spec, backend, rows, cols)


def describe(desc: OperationDescriptor) -> dict[str, Any]:
    """JSON-friendly summary of a descriptor (used by the CLI listing)."""
    return {
        "name": desc.name,
        "kind": desc.kind,
        "hyperparams": {k: hp.default for k, hp in desc.hyperparam_space.items()},
        "backends": sorted(b.value for b in desc.backends),
    }
