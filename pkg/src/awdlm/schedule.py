"""Learning-rate machinery: range finder, SGDR restarts, per-group rates, unfreezing."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Protocol, Sequence

import numpy as np


class NoDescent(RuntimeError):
    pass


class AllUnfrozen(RuntimeError):
    pass


@dataclass(frozen=True)
class SgdrClock:
    T: float
    t: float
    lr_max: float
    lr_min: float = 0.0

    def __post_init__(self):
        if self.T <= 0 or not 0 <= self.t <= self.T:
            raise ValueError(f"invalid clock position t={self.t} of T={self.T}")

    def advance(self, steps: float = 1) -> "SgdrClock":
        """Move forward, restarting at 0 whenever a cycle completes."""
        t = self.t + steps
        if t >= self.T:
            t = 0.0
        return replace(self, t=t)


def sgdr_lr(clock: SgdrClock) -> float:
    return clock.lr_min + 0.5 * (clock.lr_max - clock.lr_min) * (1 + math.cos(math.pi * clock.t / clock.T))


@dataclass(frozen=True)
class GroupLrPolicy:
    """Base learning rate and frozen flag per layer group, input side first."""

    base_lrs: tuple[float, ...]
    frozen: tuple[bool, ...]

    def __post_init__(self):
        if len(self.base_lrs) != len(self.frozen):
            raise ValueError("need one frozen flag per group")

    @classmethod
    def output_only(cls, base_lrs: Sequence[float]) -> "GroupLrPolicy":
        """Every group frozen except the last (decoder) group."""
        n = len(base_lrs)
        return cls(tuple(base_lrs), tuple(i < n - 1 for i in range(n)))

    @classmethod
    def all_unfrozen(cls, base_lrs: Sequence[float]) -> "GroupLrPolicy":
        return cls(tuple(base_lrs), (False,) * len(base_lrs))

    def with_base_lrs(self, base_lrs: Sequence[float]) -> "GroupLrPolicy":
        return replace(self, base_lrs=tuple(base_lrs))


def effective_group_lrs(policy: GroupLrPolicy, schedule_lr: float, base_max: float) -> list[float]:
    """Scale every group's base rate by ``schedule_lr / base_max``; frozen groups get 0."""
    if base_max <= 0:
        raise ValueError("base_max must be positive")
    ratio = schedule_lr / base_max
    return [0.0 if fz else lr * ratio for lr, fz in zip(policy.base_lrs, policy.frozen)]


def unfreeze_next(policy: GroupLrPolicy) -> GroupLrPolicy:
    frozen = list(policy.frozen)
    for g in reversed(range(len(frozen))):
        if frozen[g]:
            frozen[g] = False
            return replace(policy, frozen=tuple(frozen))
    raise AllUnfrozen("every group is already trainable")


class Trainable(Protocol):
    def train_step(self, batch, lr: float) -> float: ...
    def snapshot(self): ...
    def restore(self, snap) -> None: ...


@dataclass
class LrFinderTrace:
    lrs: list[float]
    losses: list[float]
    suggested_lr: float
    max_descending_lr: float

    def to_csv(self) -> str:
        lines = ["lr,loss"] + [f"{lr!r},{loss!r}" for lr, loss in zip(self.lrs, self.losses)]
        return "\n".join(lines) + "\n"


def lr_find(model: Trainable, batches: Iterable, lr_start: float = 1e-7, lr_end: float = 10.0,
            steps: int = 100, beta: float = 0.98, diverge_factor: float = 4.0) -> LrFinderTrace:
    """Exponential LR range test.

    The rate is multiplied by ``(lr_end / lr_start) ** (1 / steps)`` after
    every batch while a bias-corrected exponential average of the loss is
    recorded. The run stops once that average exceeds ``diverge_factor``
    times its best value. ``model`` is restored to its starting state.
    """
    if steps < 10:
        raise ValueError("lr_find needs at least 10 steps")
    factor = (lr_end / lr_start) ** (1.0 / steps)
    snap = model.snapshot()
    lrs, losses = [], []
    avg, best = 0.0, math.inf
    it = iter(batches)
    try:
        for i in range(steps + 1):
            try:
                batch = next(it)
            except StopIteration:
                break
            lr = lr_start * factor ** i
            loss = model.train_step(batch, lr)
            if not math.isfinite(loss):
                break
            avg = beta * avg + (1 - beta) * loss
            smoothed = avg / (1 - beta ** (i + 1))
            lrs.append(lr)
            losses.append(smoothed)
            best = min(best, smoothed)
            if smoothed > diverge_factor * best:
                break
    finally:
        model.restore(snap)
    return _suggest(lrs, losses)


def _suggest(lrs: list[float], losses: list[float]) -> LrFinderTrace:
    if len(lrs) < 3 or min(losses) >= losses[0]:
        raise NoDescent("loss never decreased during the range test")
    lr_arr, loss_arr = np.array(lrs), np.array(losses)
    best = int(np.argmin(loss_arr))
    slope = np.gradient(loss_arr, np.log(lr_arr))
    # steepest descent, looked for only up to the loss minimum
    steepest = int(np.argmin(slope[: best + 1]))
    return LrFinderTrace(lrs, losses, float(lr_arr[steepest]), float(lr_arr[best]))


def load_trace_csv(text: str) -> tuple[list[float], list[float]]:
    lrs, losses = [], []
    for line in text.strip().splitlines()[1:]:
        lr, loss = line.split(",")
        lrs.append(float(lr))
        losses.append(float(loss))
    return lrs, losses
