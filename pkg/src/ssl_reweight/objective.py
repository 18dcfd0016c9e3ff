"""Supervised and Pseudo-Label losses and the per-example weighted SSL objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import network
from .network import ModelParams


@dataclass(frozen=True)
class LossSpec:
    kind: str = "combined"  # supervised_ce | pseudo_label_ce | combined
    pseudo_label_threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in ("supervised_ce", "pseudo_label_ce", "combined"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.pseudo_label_threshold <= 1.0:
            raise ValueError("pseudo_label_threshold must lie in [0, 1]")


@dataclass
class WeightVector:
    """Per-example weights for the unlabeled set, indexed by example id ``0..n-1``."""

    values: np.ndarray
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ValueError("weights must be non-negative")
        if self.m is None:
            self.m = np.zeros_like(self.values)
        if self.v is None:
            self.v = np.zeros_like(self.values)

    @classmethod
    def constant(cls, n: int, value: float) -> "WeightVector":
        return cls(np.full(int(n), float(value)))

    def __len__(self):
        return self.values.shape[0]

    def take(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            bad = ids[(ids < 0) | (ids >= len(self))]
            raise KeyError(f"no weight for unlabeled ids {bad.tolist()}")
        return self.values[ids]


def softmax_ce(logits, target_onehot) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target_onehot, dtype=np.float64)
    if target.shape != logits.shape or not (np.all((target == 0) | (target == 1)) and target.sum() == 1):
        raise ValueError(f"target must be one-hot with {logits.shape[0]} entries, got {target}")
    logp = network.log_softmax(logits[None, :])[0]
    return float(-(target @ logp)), np.exp(logp) - target


def pseudo_label(logits, threshold: float = 0.0) -> np.ndarray | None:
    """One-hot argmax of the predicted distribution, or ``None`` below ``threshold``.

    Ties go to the lowest class index.
    """
    probs = network.softmax(np.asarray(logits, dtype=np.float64)[None, :])[0]
    k = int(np.argmax(probs))
    if probs[k] < threshold:
        return None
    out = np.zeros_like(probs)
    out[k] = 1.0
    return out


def pseudo_labels(logits: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Batched ``pseudo_label``: rows below the threshold are all zero (no target)."""
    probs = network.softmax(logits)
    k = probs.argmax(axis=1)
    out = np.zeros_like(probs)
    rows = np.arange(probs.shape[0])
    out[rows, k] = 1.0
    out[probs[rows, k] < threshold] = 0.0
    return out


def onehot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class Batch:
    """Stacked labeled + unlabeled rows with per-row loss coefficients.

    ``coef`` already carries the mean normalization of each part and the
    per-example weights of the unlabeled rows.
    """

    x: np.ndarray
    targets: np.ndarray
    coef: np.ndarray
    n_labeled: int


def build_batch(params: ModelParams, xd, yd, xu=None, lam_u=None,
                spec: LossSpec = LossSpec(), targets_u=None) -> Batch:
    """Assemble the weighted objective for one step.

    Pseudo-labels are computed from ``params`` unless ``targets_u`` is given;
    either way they are treated as constants.
    """
    c = params.num_classes
    xd = np.asarray(xd, dtype=np.float64).reshape(-1, params.input_dim)
    nd = xd.shape[0]
    parts_x = [xd]
    parts_t = [onehot(yd, c)]
    parts_c = [np.full(nd, 1.0 / nd) if nd else np.zeros(0)]
    if spec.kind == "pseudo_label_ce":
        parts_c[0] = np.zeros(nd)
    if xu is not None and len(xu) and spec.kind != "supervised_ce":
        xu = np.asarray(xu, dtype=np.float64)
        nu = xu.shape[0]
        lam_u = np.asarray(lam_u, dtype=np.float64)
        if lam_u.shape != (nu,):
            raise ValueError(f"need one weight per unlabeled row ({nu}), got shape {lam_u.shape}")
        if targets_u is None:
            logits, _ = network.forward(params, xu)
            targets_u = pseudo_labels(logits, spec.pseudo_label_threshold)
        parts_x.append(xu)
        parts_t.append(targets_u)
        parts_c.append(lam_u / nu)
    return Batch(np.vstack(parts_x), np.vstack(parts_t), np.concatenate(parts_c), nd)


def combined_loss_and_grad(params: ModelParams, batch: Batch):
    if batch.x.shape[0] == 0:
        raise ValueError("empty batch")
    return network.loss_and_grad(params, batch.x, batch.targets, batch.coef)


def combined_loss(params: ModelParams, xd, yd, xu=None, u_ids=None,
                  weights: WeightVector | None = None, spec: LossSpec = LossSpec()) -> float:
    """Mean supervised CE on the labeled batch plus the mean of ``lambda_u * CE(pseudo-label)``."""
    lam = None
    if xu is not None and len(xu):
        if weights is None or u_ids is None:
            raise ValueError("unlabeled rows need ids and a weight vector")
        lam = weights.take(u_ids)
    batch = build_batch(params, xd, yd, xu, lam, spec)
    logits, _ = network.forward(params, batch.x)
    losses = -(batch.targets * network.log_softmax(logits)).sum(axis=1)
    return float(batch.coef @ losses)


def reparam_binary(params: ModelParams) -> ModelParams:
    """Collapse a two-output softmax layer to one output ``f`` with logits ``(f, -f)``.

    The new parameters are ``(theta_1 - theta_2) / 2`` so the logits equal the
    originals shifted by their mean and class probabilities are unchanged.
    """
    if params.binary:
        return params.copy()
    w, b = params.layers[-1]
    if w.shape[1] != 2:
        raise ValueError(f"binary reparameterization needs 2 classes, got {w.shape[1]}")
    new_w = 0.5 * (w[:, :1] - w[:, 1:])
    new_b = 0.5 * (b[:1] - b[1:])
    layers = [(lw.copy(), lb.copy()) for lw, lb in params.layers[:-1]]
    layers.append((new_w, new_b))
    return ModelParams(layers, binary=True)
