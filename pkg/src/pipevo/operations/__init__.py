from pipevo.operations.registry import (
    BACKENDS,
    REGISTRY,
    FittedOperation,
    HyperParam,
    ImplementationDescriptor,
    OperationDescriptor,
    OperationRegistry,
    ResourceProfile,
    estimate_fit_time,
    fit_operation,
    list_operations,
    predict_operation,
)

__all__ = [
    "BACKENDS",
    "REGISTRY",
    "FittedOperation",
    "HyperParam",
    "ImplementationDescriptor",
    "OperationDescriptor",
    "OperationRegistry",
    "ResourceProfile",
    "estimate_fit_time",
    "fit_operation",
    "list_operations",
    "predict_operation",
]
