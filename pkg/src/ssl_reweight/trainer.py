"""Bi-level training loop: inner network steps, outer per-example weight steps."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import network
from .data import SplitDataset
from .influence import IhvpMode, influence_scores
from .linalg import NotPositiveDefiniteError
from .network import ModelParams
from .objective import LossSpec, WeightVector, build_batch, combined_loss_and_grad
from .optim import SGD, Adam, AdamState, adam_step, madam_step

log = logging.getLogger(__name__)

FULL_VALIDATION_MAX = 1024


@dataclass
class TrainConfig:
    inner_steps: int = 10
    theta_step: float = 0.01
    lambda_step: float = 0.01
    warmup_iters: int = 0
    warmup_supervised: bool = False
    outer_iters: int = 30
    batch_labeled: int = 10
    batch_unlabeled: int = 100
    batch_validation: int = 30
    lambda_init: float = 1.0
    damping: float = 1e-3
    ihvp_mode: str = "exact"
    seed: int = 0
    single_lambda_mode: bool = False
    hidden: int = 100
    depth: int = 2
    binary: bool = True
    theta_optimizer: str = "adam"
    momentum: float = 0.9
    pseudo_label_threshold: float = 0.0

    def validate(self, data: SplitDataset | None = None) -> list[str]:
        """Every problem with the config, as ``key: reason`` strings."""
        errs = []
        if self.inner_steps < 1:
            errs.append("inner_steps: must be >= 1")
        if self.theta_step <= 0:
            errs.append("theta_step: must be > 0")
        if self.lambda_step < 0:
            errs.append("lambda_step: must be >= 0")
        for key in ("warmup_iters", "outer_iters"):
            if getattr(self, key) < 0:
                errs.append(f"{key}: must be >= 0")
        for key in ("batch_labeled", "batch_unlabeled", "batch_validation", "hidden"):
            if getattr(self, key) < 1:
                errs.append(f"{key}: must be >= 1")
        if self.depth < 2:
            errs.append("depth: must be >= 2")
        if self.lambda_init < 0:
            errs.append("lambda_init: must be >= 0")
        if self.damping <= 0:
            errs.append("damping: must be > 0")
        try:
            IhvpMode.parse(self.ihvp_mode)
        except ValueError as exc:
            errs.append(f"ihvp_mode: {exc}")
        if self.theta_optimizer not in ("adam", "sgd"):
            errs.append("theta_optimizer: must be adam or sgd")
        if not 0.0 <= self.pseudo_label_threshold <= 1.0:
            errs.append("pseudo_label_threshold: must lie in [0, 1]")
        if data is not None:
            sizes = data.sizes()
            for key, split in (("batch_labeled", "labeled"), ("batch_unlabeled", "unlabeled"),
                               ("batch_validation", "validation")):
                if getattr(self, key) > sizes[split] and sizes[split] > 0:
                    errs.append(f"{key}: exceeds {split} set size {sizes[split]}")
        return errs

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class LogRow:
    iter: int
    val_loss: float
    val_err: float
    test_err: float
    lambda_mean: float
    lambda_min: float
    lambda_max: float


@dataclass
class TrainResult:
    params: ModelParams
    weights: WeightVector
    log: list[LogRow] = field(default_factory=list)
    wall_clock: float = 0.0


class TrainingError(RuntimeError):
    """Numerical failure; ``snapshot`` holds the state at the failing iteration."""

    def __init__(self, msg, iteration, snapshot=None):
        super().__init__(msg)
        self.iteration = iteration
        self.snapshot = snapshot


class EpochSampler:
    """Batches drawn without replacement, reshuffled every epoch."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n = n
        self.batch = min(batch, n)
        self.rng = rng
        self.order = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        if self.pos + self.batch > len(self.order):
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return idx


def evaluate(params: ModelParams, x, y) -> tuple[float, float]:
    """Mean cross-entropy and error rate on a labeled set."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits, _ = network.forward(params, x)
    logp = network.log_softmax(logits)
    loss = float(-logp[np.arange(len(y)), y].mean())
    # argmax picks the lowest index on ties, matching pseudo-labels
    err = float(np.mean(logits.argmax(axis=1) != y))
    return loss, err


def pseudo_label_correct(params: ModelParams, data: SplitDataset) -> np.ndarray:
    """Whether each unlabeled example's current pseudo-label matches its hidden label."""
    logits, _ = network.forward(params, data.unlabeled)
    return logits.argmax(axis=1) == data.hidden_labels()


def _streams(seed: int):
    ss = np.random.SeedSequence(int(seed)).spawn(3)
    return [np.random.Generator(np.random.PCG64(s)) for s in ss]


def _log_row(it, params, weights, data) -> LogRow:
    val_loss, val_err = evaluate(params, data.val_x, data.val_y)
    test_err = evaluate(params, data.test_x, data.test_y)[1] if len(data.test_y) else float("nan")
    lam = weights.values
    if lam.size:
        stats = float(lam.mean()), float(lam.min()), float(lam.max())
    else:
        stats = (float("nan"),) * 3
    return LogRow(it, val_loss, val_err, test_err, *stats)


def train(config: TrainConfig, data: SplitDataset, callback=None) -> TrainResult:
    """Alternate ``inner_steps`` network updates with one influence-driven weight update.

    ``callback(iteration, params, weights)`` is invoked on the initial state
    (iteration 0) and after every outer iteration.
    """
    errs = config.validate(data)
    if errs:
        raise ValueError("invalid config: " + "; ".join(errs))
    start = time.perf_counter()
    mode = IhvpMode.parse(config.ihvp_mode)
    spec = LossSpec(pseudo_label_threshold=config.pseudo_label_threshold)
    init_rng, inner_rng, outer_rng = _streams(config.seed)

    params = network.init_params([data.input_dim] + [config.hidden] * (config.depth - 1) + [2],
                                 binary=config.binary, rng=init_rng)
    if config.theta_optimizer == "adam":
        theta_opt = Adam(lr=config.theta_step)
    else:
        theta_opt = SGD(config.theta_step, config.momentum)

    n_u = len(data.unlabeled)
    weights = WeightVector.constant(n_u, config.lambda_init)
    lam_state = AdamState(weights.m, weights.v, step_size=config.lambda_step)
    shared = AdamState.zeros(1, step_size=config.lambda_step)
    shared_value = np.array([config.lambda_init])

    d_inner = EpochSampler(len(data.labeled_y), config.batch_labeled, inner_rng)
    u_inner = EpochSampler(n_u, config.batch_unlabeled, inner_rng)
    d_outer = EpochSampler(len(data.labeled_y), config.batch_labeled, outer_rng)
    u_outer = EpochSampler(n_u, config.batch_unlabeled, outer_rng)
    full_val = len(data.val_y) <= FULL_VALIDATION_MAX
    v_outer = None if full_val else EpochSampler(len(data.val_y), config.batch_validation, outer_rng)

    def theta_step(it, warm=False):
        d, u = d_inner.next(), u_inner.next()
        lam = weights.values[u]
        if warm and config.warmup_supervised:
            lam = np.zeros_like(lam)
        batch = build_batch(params, data.labeled_x[d], data.labeled_y[d],
                            data.unlabeled[u], lam, spec)
        loss, grads = combined_loss_and_grad(params, batch)
        flat = [g for pair in grads for g in pair]
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in flat):
            raise TrainingError(f"non-finite training loss at outer iteration {it}", it, params.copy())
        theta_opt.step(params.arrays(), flat)

    for _ in range(config.warmup_iters):
        theta_step(0, warm=True)

    result = TrainResult(params, weights)
    if callback is not None:
        callback(0, params, weights)
    for it in range(1, config.outer_iters + 1):
        for _ in range(config.inner_steps):
            theta_step(it)
        if config.lambda_step > 0 and n_u:
            d, u = d_outer.next(), u_outer.next()
            if full_val:
                xv, yv = data.val_x, data.val_y
            else:
                v = v_outer.next()
                xv, yv = data.val_x[v], data.val_y[v]
            batch = build_batch(params, data.labeled_x[d], data.labeled_y[d],
                                data.unlabeled[u], weights.values[u], spec)
            try:
                report = influence_scores(params, batch, xv, yv, mode, config.damping, u_ids=u)
            except NotPositiveDefiniteError as exc:
                raise TrainingError(f"outer iteration {it}: {exc}", it, params.copy()) from exc
            except FloatingPointError as exc:
                raise TrainingError(f"outer iteration {it}: {exc}", it, params.copy()) from exc
            if config.single_lambda_mode:
                adam_step(shared, shared_value, np.array([report.scores.sum()]))
                shared_value[0] = max(shared_value[0], 0.0)
                weights.values[:] = shared_value[0]
            else:
                g = np.zeros(n_u)
                g[u] = report.scores
                mask = np.zeros(n_u, dtype=bool)
                mask[u] = True
                madam_step(lam_state, weights.values, g, mask)
                np.maximum(weights.values, 0.0, out=weights.values)
        row = _log_row(it, params, weights, data)
        if not np.isfinite(row.val_loss):
            raise TrainingError(f"non-finite validation loss at outer iteration {it}", it, params.copy())
        result.log.append(row)
        if callback is not None:
            callback(it, params, weights)
        log.debug("iter %d val_loss %.4f test_err %.4f", it, row.val_loss, row.test_err)
    result.wall_clock = time.perf_counter() - start
    return result


def train_single_lambda(config: TrainConfig, data: SplitDataset, callback=None) -> TrainResult:
    """Same loop with one shared weight whose hypergradient is the summed influence."""
    return train(config.replace(single_lambda_mode=True), data, callback)
