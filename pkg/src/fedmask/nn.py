"""Feed-forward classifier with analytic gradients and SGD-with-momentum.

All arithmetic is float64.  The network is a stack of dense layers with
rectifier activations on the hidden layers; gradients are exact chain-rule
expressions, which keeps finite-difference checks tight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError

PRIOR_FLOOR = 1e-8


@dataclass(frozen=True)
class Architecture:
    """Layer widths of the classifier: input -> hidden... -> num_classes."""

    input_dim: int
    hidden: tuple[int, ...]
    num_classes: int

    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))


@dataclass
class ModelParams:
    """Ordered named tensors of one classifier."""

    arch: Architecture
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def names(self) -> list[str]:
        return list(self.tensors.keys())


Gradients = dict  # name -> np.ndarray, shape-matched to ModelParams.tensors


def init_params(arch: Architecture, rng_seed: int) -> ModelParams:
    """Symmetric uniform init: U(-sqrt(6/(fan_in+fan_out)), +...) weights, zero biases."""
    rng = np.random.default_rng(rng_seed)
    tensors: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(arch.layer_dims()):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"w{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        tensors[f"b{i}"] = np.zeros(fan_out)
    return ModelParams(arch, tensors)


def _check_features(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise ShapeMismatchError(
            f"features shape {x.shape} incompatible with input_dim={params.arch.input_dim}"
        )
    return x


def forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Pre-softmax logits, shape (batch, num_classes)."""
    x = _check_features(params, features)
    n_layers = len(params.arch.layer_dims())
    a = x
    for i in range(n_layers):
        z = a @ params.tensors[f"w{i}"] + params.tensors[f"b{i}"]
        a = np.maximum(z, 0.0) if i < n_layers - 1 else z
    return a


def backward(params: ModelParams, features: np.ndarray, upstream: np.ndarray) -> Gradients:
    """Exact parameter gradients given d(loss)/d(logits).

    ``upstream`` is used as-is: if it already contains the batch-mean factor
    (as the loss functions in this package return), so do the results.
    """
    x = _check_features(params, features)
    dims = params.arch.layer_dims()
    n_layers = len(dims)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (x.shape[0], params.arch.num_classes):
        raise ShapeMismatchError(
            f"upstream shape {up.shape} != (batch={x.shape[0]}, C={params.arch.num_classes})"
        )

    # Forward pass, caching layer inputs and pre-activations.
    inputs = [x]
    pre = []
    a = x
    for i in range(n_layers):
        z = a @ params.tensors[f"w{i}"] + params.tensors[f"b{i}"]
        pre.append(z)
        a = np.maximum(z, 0.0) if i < n_layers - 1 else z
        inputs.append(a)

    grads: Gradients = {}
    delta = up
    for i in reversed(range(n_layers)):
        grads[f"w{i}"] = inputs[i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.tensors[f"w{i}"].T) * (pre[i - 1] > 0.0)
    return {name: grads[name] for name in params.tensors}


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stabilized softmax (max subtraction)."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise IndexError(f"label out of range [0, {num_classes})")
    return y


def cross_entropy(
    logits: np.ndarray, labels: np.ndarray, prior: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the raw logits.

    With a prior, logits are adjusted to ``logits + log(prior)`` before the
    softmax (prior entries floored at 1e-8 so missing classes stay finite).
    The gradient is softmax(adjusted) - onehot(labels), divided by the batch.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    y = _check_labels(labels, z.shape[1])
    if prior is not None:
        z = z + np.log(np.maximum(np.asarray(prior, dtype=np.float64), PRIOR_FLOOR))
    b = z.shape[0]
    ls = log_softmax(z)
    loss = float(-ls[np.arange(b), y].mean())
    dlogits = softmax(z)
    dlogits[np.arange(b), y] -= 1.0
    return loss, dlogits / b


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Plain per-sample CE losses, no adjustment, no reduction."""
    z = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, z.shape[1])
    return -log_softmax(z)[np.arange(z.shape[0]), y]


@dataclass
class OptimizerState:
    """SGD hyperparameters plus per-tensor momentum buffers."""

    lr: float
    momentum: float
    weight_decay: float
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: ModelParams, lr: float, momentum: float, weight_decay: float):
        bufs = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        return cls(lr=lr, momentum=momentum, weight_decay=weight_decay, buffers=bufs)


def sgd_step(params: ModelParams, grads: Gradients, state: OptimizerState) -> ModelParams:
    """One momentum-SGD update: buf <- m*buf + (g + wd*p); p <- p - lr*buf.

    Mutates ``state.buffers`` in place and returns new parameters.
    """
    new_tensors: dict[str, np.ndarray] = {}
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        buf = state.momentum * state.buffers[name] + (g + state.weight_decay * p)
        state.buffers[name] = buf
        new_tensors[name] = p - state.lr * buf
    return ModelParams(params.arch, new_tensors)


def save_params(path, params: ModelParams) -> None:
    """Checkpoint to .npz; round-trips bit-exactly."""
    payload = {f"tensor_{i:03d}_{name}": arr for i, (name, arr) in enumerate(params.tensors.items())}
    payload["arch"] = np.array(
        [params.arch.input_dim, *params.arch.hidden, params.arch.num_classes], dtype=np.int64
    )
    np.savez(path, **payload)


def load_params(path) -> ModelParams:
    with np.load(path) as data:
        arch_vec = data["arch"]
        arch = Architecture(int(arch_vec[0]), tuple(int(w) for w in arch_vec[1:-1]), int(arch_vec[-1]))
        keys = sorted(k for k in data.files if k.startswith("tensor_"))
        tensors = {k.split("_", 2)[2]: data[k].astype(np.float64) for k in keys}
    return ModelParams(arch, tensors)
