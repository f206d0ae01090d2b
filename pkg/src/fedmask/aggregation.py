"""Server-side model combination: weighted averaging, coordinate-wise median,
Weiszfeld geometric median, and the local/global pre-merge blend."""

from __future__ import annotations

import numpy as np

from .errors import AggregationError, ShapeMismatchError
from .nn import ModelParams

AGGREGATION_METHODS = ("average", "coord_median", "geometric_median")


def _check_models(models: list[ModelParams]) -> None:
    if not models:
        raise AggregationError("need at least one model")
    arch = models[0].arch
    names = models[0].names()
    for m in models[1:]:
        if m.arch != arch or m.names() != names:
            raise AggregationError("all models must share the same architecture")


def weighted_average(models: list[ModelParams], data_weights) -> ModelParams:
    """Convex combination with weights proportional to client sample counts."""
    _check_models(models)
    w = np.asarray(data_weights, dtype=np.float64)
    if w.shape != (len(models),) or np.any(w < 0):
        raise AggregationError("weights must be nonnegative, one per model")
    total = w.sum()
    if total <= 0:
        raise AggregationError("weight sum must be positive")
    w = w / total
    tensors = {
        name: sum(w[i] * m.tensors[name] for i, m in enumerate(models))
        for name in models[0].tensors
    }
    return ModelParams(models[0].arch, tensors)


def coordinate_median(models: list[ModelParams]) -> ModelParams:
    """Unweighted per-coordinate median across clients."""
    _check_models(models)
    tensors = {
        name: np.median(np.stack([m.tensors[name] for m in models]), axis=0)
        for name in models[0].tensors
    }
    return ModelParams(models[0].arch, tensors)


def _weiszfeld(stack: np.ndarray, eps: float, max_iter: int) -> np.ndarray:
    mu = stack.mean(axis=0)
    for _ in range(max_iter):
        dist = np.linalg.norm(stack - mu, axis=1)
        w = 1.0 / np.maximum(dist, eps)
        w = w / w.sum()
        mu_new = w @ stack
        if np.linalg.norm(mu_new - mu) < eps:
            break
        mu = mu_new
    return mu


def geometric_median(
    models: list[ModelParams], eps: float = 1e-5, max_iter: int = 10
) -> ModelParams:
    """Weiszfeld geometric median, run per named tensor on flattened vectors.

    Starts from the unweighted mean; each iteration reweights clients by the
    inverse distance to the current estimate, with ``eps`` flooring the
    distances and doubling as the movement-based stopping threshold.
    """
    _check_models(models)
    if eps <= 0:
        raise AggregationError("eps must be positive")
    tensors = {}
    for name in models[0].tensors:
        shape = models[0].tensors[name].shape
        stack = np.stack([m.tensors[name].ravel() for m in models])
        tensors[name] = _weiszfeld(stack, eps, max_iter).reshape(shape)
    return ModelParams(models[0].arch, tensors)


def pre_merge(local: ModelParams, global_params: ModelParams, zeta: float) -> ModelParams:
    """Blend a trained local model back toward the received global model.

    Returns zeta * local + (1 - zeta) * global, elementwise.  The endpoints
    zeta == 1 and zeta == 0 return exact copies of local/global.
    """
    if local.arch != global_params.arch or local.names() != global_params.names():
        raise ShapeMismatchError("pre_merge requires matching architectures")
    if zeta == 1.0:
        return local.copy()
    if zeta == 0.0:
        return global_params.copy()
    tensors = {
        name: zeta * local.tensors[name] + (1.0 - zeta) * global_params.tensors[name]
        for name in local.tensors
    }
    return ModelParams(local.arch, tensors)


def aggregate(
    models: list[ModelParams],
    data_weights,
    method: str,
    eps: float = 1e-5,
    max_iter: int = 10,
) -> ModelParams:
    """Dispatch to the configured aggregation rule."""
    if method == "average":
        return weighted_average(models, data_weights)
    if method == "coord_median":
        return coordinate_median(models)
    if method == "geometric_median":
        return geometric_median(models, eps=eps, max_iter=max_iter)
    raise AggregationError(f"unknown aggregation method {method!r}")
