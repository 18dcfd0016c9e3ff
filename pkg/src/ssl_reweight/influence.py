"""Last-layer Hessian, inverse-Hessian-vector products and influence scores.

The influence of unlabeled example ``u`` on the validation loss is

    score_u = -g_V^T H^{-1} grad CE_u

with ``g_V`` the last-layer gradient of the mean validation loss, ``H`` the
damped last-layer Hessian of the weighted training objective and
``grad CE_u`` the last-layer gradient of ``u``'s unweighted loss. It is the
derivative of the validation loss at the optimum when ``eps * CE_u`` is
added to the training objective; since the objective carries ``u`` with
coefficient ``lambda_u / |U'|`` the derivative w.r.t. ``lambda_u`` itself is
``score_u / |U'|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg, network
from .network import ModelParams
from .objective import Batch, LossSpec, build_batch, onehot, pseudo_labels


@dataclass(frozen=True)
class IhvpMode:
    variant: str = "exact"  # exact | identity | neumann
    terms: int = 10
    scale: float | None = None  # neumann only; None = 1 / largest eigenvalue

    def __post_init__(self):
        if self.variant not in ("exact", "identity", "neumann"):
            raise ValueError(f"unknown IHVP mode {self.variant!r}")
        if self.terms < 1:
            raise ValueError("neumann terms must be >= 1")
        if self.scale is not None and self.scale <= 0:
            raise ValueError("neumann scale must be positive")

    @classmethod
    def parse(cls, text: str) -> "IhvpMode":
        """``exact``, ``identity``, ``neumann``, ``neumann:K`` or ``neumann:K:SCALE``."""
        parts = str(text).strip().split(":")
        if parts[0] != "neumann":
            if len(parts) > 1:
                raise ValueError(f"mode {parts[0]!r} takes no arguments")
            return cls(parts[0])
        terms = int(parts[1]) if len(parts) > 1 else 10
        scale = float(parts[2]) if len(parts) > 2 else None
        return cls("neumann", terms, scale)

    def __str__(self):
        if self.variant != "neumann":
            return self.variant
        return f"neumann:{self.terms}" + ("" if self.scale is None else f":{self.scale!r}")


@dataclass
class InfluenceReport:
    batch_ids: np.ndarray
    scores: np.ndarray
    mode: IhvpMode
    hessian_condition: float | None = None


class ConvergenceError(RuntimeError):
    pass


def assemble_hessian(params: ModelParams, batch: Batch, damping: float) -> np.ndarray:
    """Damped Hessian of ``sum_i coef_i CE_i`` w.r.t. the flat last layer.

    Uses the closed form of the softmax cross-entropy curvature; targets
    only matter through whether a row is active (all-zero rows contribute
    nothing).
    """
    if damping <= 0:
        raise ValueError("damping must be positive")
    if batch.x.shape[0] == 0:
        raise ValueError("cannot assemble a Hessian on an empty batch")
    logits, cache = network.forward(params, batch.x)
    probs = network.softmax(logits)
    c = batch.coef * batch.targets.sum(axis=1)
    a = network.augmented(cache.features)
    if params.binary:
        curv = 4.0 * probs[:, 0] * probs[:, 1]
        h = (a * (c * curv)[:, None]).T @ a
    else:
        k = probs.shape[1]
        s = -probs[:, :, None] * probs[:, None, :]
        s[:, np.arange(k), np.arange(k)] += probs
        h = np.einsum("bi,bj,bkl->ikjl", a * c[:, None], a, s, optimize=True)
        h = h.reshape(a.shape[1] * k, a.shape[1] * k)
    h = 0.5 * (h + h.T)
    h[np.diag_indices_from(h)] += damping
    if not np.all(np.isfinite(h)):
        bad = np.flatnonzero(~np.all(np.isfinite(a), axis=1) | ~np.all(np.isfinite(probs), axis=1))
        raise FloatingPointError(f"non-finite Hessian entries; offending batch rows {bad.tolist()}")
    return h


def neumann_scale(h: np.ndarray) -> float:
    return 1.0 / float(np.linalg.eigvalsh(h)[-1])


def ihvp(h: np.ndarray, v, mode: IhvpMode = IhvpMode()) -> np.ndarray:
    """Approximate ``H^{-1} v`` according to ``mode``."""
    v = np.asarray(v, dtype=np.float64)
    if mode.variant == "identity":
        return v.copy()
    if mode.variant == "exact":
        return linalg.solve_spd(h, v)
    scale = neumann_scale(h) if mode.scale is None else mode.scale
    # scale * sum_{j<K} (I - scale H)^j v
    term = v.copy()
    total = v.copy()
    for _ in range(mode.terms - 1):
        term = term - scale * (h @ term)
        total += term
    return scale * total


def validation_grad(params: ModelParams, x_val, y_val) -> tuple[float, np.ndarray]:
    loss, grads = network.loss_and_grad(params, x_val, onehot(y_val, params.num_classes))
    return loss, network.last_layer_grad(params, grads)


def influence_scores(params: ModelParams, batch: Batch, x_val, y_val,
                     mode: IhvpMode = IhvpMode(), damping: float = 1e-3,
                     u_ids=None) -> InfluenceReport:
    """Influence of every unlabeled row of ``batch`` on the mean validation loss.

    The Hessian is assembled on the whole batch (labeled and weighted
    unlabeled rows); one IHVP of the validation gradient is dotted with each
    per-example gradient, which is valid because ``H`` is symmetric.
    """
    if len(x_val) == 0:
        raise ValueError("validation batch is empty")
    xu = batch.x[batch.n_labeled:]
    tu = batch.targets[batch.n_labeled:]
    u_ids = np.arange(xu.shape[0]) if u_ids is None else np.asarray(u_ids)
    if xu.shape[0] == 0:
        return InfluenceReport(u_ids, np.zeros(0), mode)
    _, g_val = validation_grad(params, x_val, y_val)
    cond = None
    if mode.variant == "identity":
        s = g_val
    else:
        h = assemble_hessian(params, batch, damping)
        s = ihvp(h, g_val, mode)
        if mode.variant == "exact":
            cond = float(np.linalg.cond(h))
    rows = network.per_example_last_layer_grads(params, xu, tu)
    scores = -(rows @ s)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite influence scores")
    return InfluenceReport(u_ids, scores, mode, cond)


class LastLayerProbe:
    """Convex weighted problem over the last layer with frozen features.

    Minimizes ``mean_D CE + (1/|U|) sum_u lambda_u CE(u, fixed target)
    + (damping / 2) |theta|^2``. Its Hessian is exactly what
    ``assemble_hessian`` returns with the same damping, so influence scores
    computed at the optimum are first-order exact.
    """

    def __init__(self, params: ModelParams, xd, yd, xu, targets_u, lam_u, xv, yv,
                 damping: float = 1e-2, tol: float = 1e-10, max_iter: int = 100):
        self.params = params.copy()
        self.damping = damping
        self.tol = tol
        self.max_iter = max_iter
        self.batch = build_batch(self.params, xd, yd, xu, lam_u, LossSpec(), targets_u=targets_u)
        self.xv = np.asarray(xv, dtype=np.float64)
        self.yv = np.asarray(yv)
        self.theta_star = None

    @property
    def n_unlabeled(self) -> int:
        return self.batch.x.shape[0] - self.batch.n_labeled

    def _batch(self, bump) -> Batch:
        if bump is None:
            return self.batch
        u, eps = bump
        coef = self.batch.coef.copy()
        coef[self.batch.n_labeled + u] += eps
        return Batch(self.batch.x, self.batch.targets, coef, self.batch.n_labeled)

    def objective(self, theta, bump=None) -> tuple[float, np.ndarray]:
        self.params.set_last_layer_flat(theta)
        batch = self._batch(bump)
        loss, grads = network.loss_and_grad(self.params, batch.x, batch.targets, batch.coef)
        loss += 0.5 * self.damping * float(theta @ theta)
        return loss, network.last_layer_grad(self.params, grads) + self.damping * theta

    def fit(self, bump=None, start=None) -> np.ndarray:
        """Damped Newton with backtracking until the gradient norm is below ``tol``."""
        theta = np.zeros(self.params.last_dim) if start is None else np.array(start, dtype=np.float64)
        batch = self._batch(bump)
        loss, grad = self.objective(theta, bump)
        for _ in range(self.max_iter):
            if np.linalg.norm(grad) <= self.tol:
                return theta
            self.params.set_last_layer_flat(theta)
            h = assemble_hessian(self.params, batch, self.damping)
            step = linalg.solve_spd(h, grad)
            t = 1.0
            gnorm = np.linalg.norm(grad)
            while True:
                cand = theta - t * step
                cand_loss, cand_grad = self.objective(cand, bump)
                # near the optimum loss decreases fall below float resolution; the
                # gradient norm still certifies progress
                if (cand_loss <= loss - 1e-4 * t * float(grad @ step)
                        or np.linalg.norm(cand_grad) < 0.5 * gnorm or t < 1e-10):
                    break
                t *= 0.5
            theta, loss, grad = cand, cand_loss, cand_grad
        if np.linalg.norm(grad) <= self.tol:
            return theta
        raise ConvergenceError(
            f"probe did not converge: |grad| = {np.linalg.norm(grad):.3e} after {self.max_iter} Newton steps"
        )

    def optimum(self) -> np.ndarray:
        if self.theta_star is None:
            self.theta_star = self.fit()
        return self.theta_star

    def val_loss(self, theta) -> float:
        self.params.set_last_layer_flat(theta)
        logits, _ = network.forward(self.params, self.xv)
        logp = network.log_softmax(logits)
        return float(-logp[np.arange(len(self.yv)), self.yv].mean())

    def influence(self, mode: IhvpMode = IhvpMode()) -> InfluenceReport:
        self.params.set_last_layer_flat(self.optimum())
        return influence_scores(self.params, self.batch, self.xv, self.yv, mode, self.damping)


def retraining_oracle(problem, u: int, epsilon: float = 1e-2) -> float:
    """Finite-difference influence: retrain with ``eps * loss_u`` added, difference the validation loss.

    ``problem`` provides ``fit(bump=None, start=None)``, ``optimum()`` and
    ``val_loss(theta)``.
    """
    if not 1e-4 <= epsilon <= 1e-1:
        raise ValueError("epsilon must lie in [1e-4, 1e-1]")
    base = problem.optimum()
    bumped = problem.fit(bump=(u, epsilon), start=base)
    return (problem.val_loss(bumped) - problem.val_loss(base)) / epsilon


def make_probe(data, n_unlabeled: int = 50, hidden: int = 100, damping: float = 1e-2,
               seed: int = 0, binary: bool = True, lambda_init: float = 1.0) -> LastLayerProbe:
    """Convex probe on ``data``: random frozen ReLU features, trainable last layer.

    Pseudo-labels come from the supervised-only optimum and are then held
    fixed, so every unlabeled term is an ordinary weighted CE term.
    """
    params = network.mlp(data.input_dim, hidden, 2, depth=2, seed=seed, binary=binary)
    xu = data.unlabeled[:n_unlabeled]
    lam = np.full(xu.shape[0], float(lambda_init))
    empty_targets = np.zeros((xu.shape[0], params.num_classes))
    sup = LastLayerProbe(params, data.labeled_x, data.labeled_y, xu, empty_targets, lam,
                         data.val_x, data.val_y, damping)
    params.set_last_layer_flat(sup.optimum())
    logits, _ = network.forward(params, xu)
    targets = pseudo_labels(logits)
    return LastLayerProbe(params, data.labeled_x, data.labeled_y, xu, targets, lam,
                          data.val_x, data.val_y, damping)
