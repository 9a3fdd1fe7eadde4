"""Held-out perplexity for any scorer, and autoregressive generation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .corpus import BOS_ID, EOS_ID, PAD_ID, UNK_ID


class ZeroProbability(ValueError):
    def __init__(self, position: int):
        super().__init__(f"model assigned zero probability at stream position {position}")
        self.position = position


class EmptyPrompt(ValueError):
    pass


class Scorer(Protocol):
    def token_log_probs(self, stream) -> np.ndarray:
        """ln p(stream[t] | stream[:t]) for t = 1 .. len(stream) - 1."""


@dataclass(frozen=True)
class EvalReport:
    token_count: int
    mean_nll: float
    perplexity: float

    def __str__(self) -> str:
        return f"tokens={self.token_count} nll={self.mean_nll:.6f} ppl={self.perplexity:.2f}"

    def to_kv(self) -> str:
        return (f"token_count={self.token_count}\nmean_nll={self.mean_nll!r}\n"
                f"perplexity={self.perplexity!r}\n")

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_kv(), encoding="utf-8")


class UniformModel:
    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def token_log_probs(self, stream) -> np.ndarray:
        return np.full(max(len(stream) - 1, 0), -math.log(self.vocab_size))


class FunctionModel:
    """Adapter for a plain ``prob(history, w)`` callable."""

    def __init__(self, prob):
        self.prob = prob

    def token_log_probs(self, stream) -> np.ndarray:
        ids = [int(x) for x in stream]
        with np.errstate(divide="ignore"):
            return np.log([self.prob(ids[:t], ids[t]) for t in range(1, len(ids))])


def perplexity(model: Scorer, stream, skip_bos: bool = True) -> EvalReport:
    """Score every token after the first; bos targets (document joins) are skipped."""
    stream = np.asarray(stream, dtype=np.int64)
    if len(stream) < 2:
        raise ValueError("need at least two tokens to score")
    logp = np.asarray(model.token_log_probs(stream), dtype=np.float64)
    keep = stream[1:] != BOS_ID if skip_bos else np.ones(len(stream) - 1, dtype=bool)
    bad = np.flatnonzero(keep & ~np.isfinite(logp))
    if bad.size:
        raise ZeroProbability(int(bad[0]) + 1)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("no scorable tokens")
    mean_nll = -math.fsum(logp[keep]) / n
    return EvalReport(n, mean_nll, math.exp(mean_nll))


BANNED_IDS = (UNK_ID, PAD_ID, BOS_ID)


def generate(model, prompt, max_len: int = 50, temperature: float = 1.0,
             rng: np.random.Generator | None = None, mode: str = "greedy") -> list[int]:
    """Continue ``prompt`` (ids) until eos or ``max_len`` new tokens.

    unk, pad and bos are never emitted. Returns only the new ids.
    """
    prompt = [int(x) for x in prompt]
    if not prompt:
        raise EmptyPrompt("generation needs at least one prompt token")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample":
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        if rng is None:
            rng = np.random.default_rng()
    out: list[int] = []
    state = model.init_state(1)
    with ad.no_grad():
        logits, state = model.forward_segment(np.array(prompt)[:, None], state)
        last = logits.data[-1].copy()
        while len(out) < max_len:
            last[list(BANNED_IDS)] = -np.inf
            if mode == "greedy":
                nxt = int(np.argmax(last))
            else:
                scaled = last / temperature
                scaled -= scaled.max()
                probs = np.exp(scaled)
                probs /= probs.sum()
                nxt = int(rng.choice(len(probs), p=probs))
            if nxt == EOS_ID:
                break
            out.append(nxt)
            logits, state = model.forward_segment(np.array([[nxt]]), state)
            last = logits.data[-1].copy()
    return out
