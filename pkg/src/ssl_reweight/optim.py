"""SGD with momentum, Adam, and masked Adam for sparse per-example weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_shapes(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"got {len(grads)} gradients for {len(params)} parameter arrays")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter shape {np.shape(p)}")


class SGD:
    """``buf = momentum * buf + g``, ``p -= lr * buf``; updates arrays in place."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.buffers = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        _check_shapes(params, grads)
        if self.buffers is None:
            self.buffers = [np.zeros_like(p) for p in params]
        for p, g, buf in zip(params, grads, self.buffers):
            buf *= self.momentum
            buf += g
            p -= self.lr * buf


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_size: float = 1e-3

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam step on a flat vector; mutates ``state`` and ``params``."""
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.m.shape):
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def madam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, mask=None) -> np.ndarray:
    """Masked Adam: moments and parameters change only where ``mask`` holds.

    ``mask`` defaults to ``grads != 0``. The step counter is global and
    advances on every call, so bias correction uses the number of outer
    steps taken, not the number of times a coordinate was updated.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.m.shape):
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    mask = grads != 0 if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != params.shape:
        raise ValueError(f"mask shape {mask.shape} does not match parameter shape {params.shape}")
    state.t += 1
    idx = np.flatnonzero(mask)
    g = grads[idx]
    m = state.beta1 * state.m[idx] + (1.0 - state.beta1) * g
    v = state.beta2 * state.v[idx] + (1.0 - state.beta2) * g * g
    state.m[idx] = m
    state.v[idx] = v
    m_hat = m / (1.0 - state.beta1 ** state.t)
    v_hat = v / (1.0 - state.beta2 ** state.t)
    params[idx] -= state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


class Adam:
    """Adam over a list of arrays (the network parameters)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.states = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        _check_shapes(params, grads)
        if self.states is None:
            self.states = [AdamState.zeros(p.size, beta1=self.beta1, beta2=self.beta2,
                                           eps=self.eps, step_size=self.lr) for p in params]
        for p, g, st in zip(params, grads, self.states):
            flat = p.reshape(-1)
            adam_step(st, flat, np.ravel(g))
            if not np.shares_memory(flat, p):
                p[...] = flat.reshape(p.shape)
