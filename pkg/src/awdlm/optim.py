"""Update rules: SGD, Adam, decoupled weight decay and NT-ASGD averaging."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class NotTriggered(RuntimeError):
    pass


def _check(param: np.ndarray, grad: np.ndarray):
    if np.shape(param) != np.shape(grad):
        from .autodiff import ShapeMismatch
        raise ShapeMismatch(f"param {np.shape(param)} vs grad {np.shape(grad)}")


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    _check(param, grad)
    return param - lr * grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected Adam; ``state`` is updated in place."""
    _check(param, grad)
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


def apply_weight_decay(param: np.ndarray, lr: float, wd: float) -> np.ndarray:
    if wd < 0:
        raise ValueError("weight decay must be >= 0")
    if wd == 0:
        return param
    return param * (1.0 - lr * wd)


@dataclass
class NtAsgdMonitor:
    """Non-monotone trigger: fire once a validation loss is worse than the
    best loss seen more than ``patience`` observations ago."""

    patience: int = 5
    history: list[float] = field(default_factory=list)
    triggered: bool = False
    trigger_step: int | None = None

    def observe(self, val_loss: float) -> bool:
        self.history.append(float(val_loss))
        n = len(self.history)
        if not self.triggered and n > self.patience:
            if val_loss > min(self.history[: n - self.patience]):
                self.triggered = True
                self.trigger_step = n - 1
        return self.triggered


def nt_asgd_observe(monitor: NtAsgdMonitor, val_loss: float) -> NtAsgdMonitor:
    monitor.observe(val_loss)
    return monitor


class AsgdAverager:
    """Running mean of parameter iterates, collected once :meth:`start` is called."""

    def __init__(self):
        self.started = False
        self.mean: list[np.ndarray] | None = None
        self.count = 0

    def start(self):
        self.started = True
        self.mean, self.count = None, 0

    def update(self, params: Sequence[np.ndarray]):
        if not self.started:
            raise NotTriggered("averaging has not been triggered")
        self.count += 1
        if self.mean is None:
            self.mean = [np.array(p, dtype=np.float64, copy=True) for p in params]
            return
        for avg, p in zip(self.mean, params):
            avg += (p - avg) / self.count

    def average(self) -> list[np.ndarray]:
        if self.mean is None:
            raise NotTriggered("no iterates averaged yet")
        return [a.copy() for a in self.mean]


def asgd_average(params: Sequence[np.ndarray], averager: AsgdAverager) -> list[np.ndarray]:
    """Fold the current iterate into the running mean and return the mean."""
    averager.update(params)
    return averager.average()


class GroupOptimizer:
    """Applies one update rule to parameter groups with per-group learning rates.

    Groups marked frozen are skipped outright: no gradient step, no decay
    and no change to their optimizer state.
    """

    def __init__(self, groups: Sequence[Sequence], mode: str = "adam", weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip: float = 0.0):
        if mode not in ("adam", "sgd", "asgd"):
            raise ValueError(f"unknown optimizer {mode!r}")
        self.groups = [list(g) for g in groups]
        self.mode = mode
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.clip = clip
        self.adam = [[AdamState.like(p.data) for p in g] for g in self.groups]

    def clip_gradients(self, frozen: Sequence[bool]):
        if self.clip <= 0:
            return
        live = [p for g, fz in zip(self.groups, frozen) if not fz for p in g if p.grad is not None]
        norm = np.sqrt(sum(float((p.grad ** 2).sum()) for p in live))
        if norm > self.clip:
            for p in live:
                p.grad = p.grad * (self.clip / norm)

    def step(self, group_lrs: Sequence[float], frozen: Sequence[bool] | None = None):
        frozen = frozen if frozen is not None else [False] * len(self.groups)
        self.clip_gradients(frozen)
        for g, (params, lr) in enumerate(zip(self.groups, group_lrs)):
            if frozen[g]:
                continue
            for k, p in enumerate(params):
                if p.grad is None:
                    continue
                data = apply_weight_decay(p.data, lr, self.weight_decay)
                if self.mode == "adam":
                    data = adam_step(data, p.grad, self.adam[g][k], lr, *self.betas, self.eps)
                else:
                    data = sgd_step(data, p.grad, lr)
                p.data = data.astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"adam": [[(s.m.copy(), s.v.copy(), s.t) for s in g] for g in self.adam],
                "mode": self.mode}

    def load_state_dict(self, state: dict):
        self.mode = state["mode"]
        self.adam = [[AdamState(m.copy(), v.copy(), t) for m, v, t in g] for g in state["adam"]]
