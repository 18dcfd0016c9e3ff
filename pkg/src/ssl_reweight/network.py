"""Fully-connected ReLU classifier with manual backprop.

The last linear layer is addressed as a flat vector (``last_layer_flat``):
the stacked matrix ``[W; b]`` of shape ``(hidden + 1, outputs)`` in row-major
order. With ``binary=True`` the last layer has a single output ``f`` and the
logits are ``(f, -f)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import make_rng


@dataclass
class ModelParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    binary: bool = False

    def __post_init__(self):
        for i in range(len(self.layers) - 1):
            w_out = self.layers[i][0].shape[1]
            w_in = self.layers[i + 1][0].shape[0]
            if w_out != w_in:
                raise ValueError(f"layer {i} outputs {w_out} units but layer {i + 1} expects {w_in}")
        if self.binary and self.layers[-1][0].shape[1] != 1:
            raise ValueError("binary parameterization needs a single-output last layer")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def num_classes(self) -> int:
        return 2 if self.binary else self.layers[-1][0].shape[1]

    @property
    def last_layer_shape(self) -> tuple[int, int]:
        w = self.layers[-1][0]
        return w.shape[0] + 1, w.shape[1]

    @property
    def last_dim(self) -> int:
        rows, cols = self.last_layer_shape
        return rows * cols

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers], self.binary)

    def last_layer_flat(self) -> np.ndarray:
        w, b = self.layers[-1]
        return np.vstack([w, b[None, :]]).ravel()

    def set_last_layer_flat(self, theta: np.ndarray) -> None:
        rows, cols = self.last_layer_shape
        stacked = np.asarray(theta, dtype=np.float64).reshape(rows, cols)
        w, b = self.layers[-1]
        w[...] = stacked[:-1]
        b[...] = stacked[-1]


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)

    @property
    def features(self) -> np.ndarray:
        """Activations feeding the last layer."""
        return self.post[-1] if self.post else self.inputs


def init_params(sizes, seed: int = 0, binary: bool = False, rng=None) -> ModelParams:
    """Normal(0, 1/fan_in) weights, zero biases.

    ``sizes`` lists the layer widths from input to output; for ``binary``
    the last entry must be 2 and the last layer is built with one output.
    """
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    if binary:
        if sizes[-1] != 2:
            raise ValueError("binary parameterization requires 2 classes")
        sizes[-1] = 1
    rng = make_rng(seed) if rng is None else rng
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(layers, binary)


def mlp(input_dim: int = 2, hidden: int = 100, num_classes: int = 2, depth: int = 2,
        seed: int = 0, binary: bool = False) -> ModelParams:
    """``depth`` fully-connected layers; ``depth - 1`` hidden ReLU layers of width ``hidden``."""
    sizes = [input_dim] + [hidden] * (depth - 1) + [num_classes]
    return init_params(sizes, seed=seed, binary=binary)


def _check_input(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"input batch has shape {x.shape}, network expects (*, {params.input_dim})")
    return x


def forward(params: ModelParams, x) -> tuple[np.ndarray, ForwardCache]:
    x = _check_input(params, x)
    cache = ForwardCache(inputs=x)
    h = x
    for w, b in params.layers[:-1]:
        z = h @ w + b
        h = np.maximum(z, 0.0)
        cache.pre.append(z)
        cache.post.append(h)
    w, b = params.layers[-1]
    out = h @ w + b
    if params.binary:
        out = np.hstack([out, -out])
    return out, cache


def logits_to_outputs(params: ModelParams, dlogits: np.ndarray) -> np.ndarray:
    """Chain a logit-space gradient through the output map to the last-layer outputs."""
    if params.binary:
        return (dlogits[:, 0] - dlogits[:, 1])[:, None]
    return dlogits


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batched backprop of ``dlogits`` (gradient of the scalar loss w.r.t. logits)."""
    delta = logits_to_outputs(params, dlogits)
    acts = [cache.inputs] + cache.post
    grads = []
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        h = acts[i]
        grads.append((h.T @ delta, delta.sum(axis=0)))
        if i > 0:
            # ReLU'(0) := 0
            delta = (delta @ w.T) * (cache.pre[i - 1] > 0.0)
    grads.reverse()
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_and_grad(params: ModelParams, x, targets, coef=None):
    """Weighted cross-entropy ``sum_i coef_i * CE_i`` and its parameter gradient.

    ``targets`` is a one-hot (or all-zero, meaning "no target") matrix.
    ``coef`` defaults to ``1/batch`` so the loss is the batch mean.
    Returns ``(loss, grads)`` where ``grads`` mirrors ``params.layers``.
    """
    x = _check_input(params, x)
    n = x.shape[0]
    if n == 0:
        raise ValueError("loss_and_grad needs a nonempty batch")
    targets = np.asarray(targets, dtype=np.float64)
    coef = np.full(n, 1.0 / n) if coef is None else np.asarray(coef, dtype=np.float64)
    logits, cache = forward(params, x)
    losses = -(targets * log_softmax(logits)).sum(axis=1)
    probs = softmax(logits)
    active = targets.sum(axis=1)
    dlogits = coef[:, None] * (probs * active[:, None] - targets)
    return float(coef @ losses), backward(params, cache, dlogits)


def augmented(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def per_example_last_layer_grads(params: ModelParams, x, targets) -> np.ndarray:
    """Row ``i`` is the last-layer gradient of the unweighted CE of example ``i``.

    One batched forward pass gives the logit gradients of every example;
    the per-example parameter gradients are outer products of those with
    the cached last-layer inputs.
    """
    x = _check_input(params, x)
    if x.shape[0] == 0:
        raise ValueError("per-example gradients need a nonempty batch")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (x.shape[0], params.num_classes):
        raise ValueError(f"targets have shape {targets.shape}, expected {(x.shape[0], params.num_classes)}")
    logits, cache = forward(params, x)
    active = targets.sum(axis=1, keepdims=True)
    delta = logits_to_outputs(params, softmax(logits) * active - targets)
    a = augmented(cache.features)
    return np.einsum("bi,bk->bik", a, delta).reshape(x.shape[0], -1)


def last_layer_grad(params: ModelParams, grads) -> np.ndarray:
    """Flatten the last-layer entry of a full gradient in ``last_layer_flat`` order."""
    dw, db = grads[-1]
    return np.vstack([dw, db[None, :]]).ravel()


def predict_proba(params: ModelParams, x) -> np.ndarray:
    logits, _ = forward(params, x)
    return softmax(logits)
