"""Tokenization, vocabulary construction and batching for BPTT training."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

UNK, PAD, BOS, EOS = "<unk>", "<pad>", "<bos>", "<eos>"
SPECIALS = (UNK, PAD, BOS, EOS)
UNK_ID, PAD_ID, BOS_ID, EOS_ID = range(4)


class StreamTooShort(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Split on runs of unicode whitespace."""
    return text.split()


@dataclass
class Vocabulary:
    id_to_token: list[str]
    counts: dict[str, int] = field(default_factory=dict)
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def decode(self, idx: int) -> str:
        return self.id_to_token[idx]

    def decode_ids(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path: str | Path) -> None:
        lines = [f"{tok}\t{self.counts.get(tok, 0)}" for tok in self.id_to_token]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens, counts = [], {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            tok, _, n = line.rpartition("\t")
            tokens.append(tok)
            if tok not in SPECIALS:
                counts[tok] = int(n)
        return cls(tokens, counts)


def build_vocab(tokens: Iterable[str], min_freq: int = 2, max_vocab: int = 60000) -> Vocabulary:
    """Keep tokens seen at least ``min_freq`` times, most frequent first.

    Ties are broken by first occurrence (``Counter`` preserves insertion
    order and ``sorted`` is stable). The four specials always come first and
    count towards ``max_vocab``.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if max_vocab < len(SPECIALS):
        raise ValueError(f"max_vocab must be >= {len(SPECIALS)}")
    counts = Counter(tokens)
    for special in SPECIALS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])
    kept = [tok for tok, n in ranked if n >= min_freq][: max_vocab - len(SPECIALS)]
    return Vocabulary(list(SPECIALS) + kept, {tok: counts[tok] for tok in kept})


def numericalize(tokens: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    return np.array([vocab.encode(t) for t in tokens], dtype=np.int64)


def encode_documents(docs: Iterable[Sequence[str]], vocab: Vocabulary) -> np.ndarray:
    """Concatenate documents into one stream, wrapping each in bos/eos."""
    ids: list[int] = []
    for doc in docs:
        ids.append(BOS_ID)
        ids.extend(vocab.encode(t) for t in doc)
        ids.append(EOS_ID)
    return np.array(ids, dtype=np.int64)


def read_corpus_dir(path: str | Path) -> list[list[str]]:
    """Read every regular file under ``path`` (sorted by name) as one document."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")
    files = sorted(p for p in root.rglob("*") if p.is_file())
    return [tokenize(p.read_text(encoding="utf-8")) for p in files]


@dataclass(frozen=True)
class BatchPlan:
    """``matrix[t, b]`` is position ``t`` of contiguous segment ``b``."""

    batch_size: int
    base_bptt: int
    matrix: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.matrix.shape[0]

    def segments(self, rng: np.random.Generator | None = None, variable: bool = True
                 ) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        """Yield ``(start, inputs, targets)`` windows of shape [T x batch].

        With ``variable`` set, each window length comes from
        :func:`sample_bptt_len`; otherwise every window is ``base_bptt`` long.
        """
        i = 0
        while i < self.n_steps - 1:
            if variable and rng is not None:
                seq_len = sample_bptt_len(self.base_bptt, rng)
            else:
                seq_len = self.base_bptt
            seq_len = min(seq_len, self.n_steps - 1 - i)
            yield i, self.matrix[i:i + seq_len], self.matrix[i + 1:i + 1 + seq_len]
            i += seq_len


def batchify(stream: np.ndarray, batch_size: int, base_bptt: int = 70) -> BatchPlan:
    stream = np.asarray(stream, dtype=np.int64)
    n = len(stream)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if n < batch_size:
        raise StreamTooShort(f"stream of {n} tokens is shorter than batch_size={batch_size}")
    seg_len = n // batch_size
    matrix = stream[: seg_len * batch_size].reshape(batch_size, seg_len).T.copy()
    return BatchPlan(batch_size, base_bptt, matrix)


def sample_bptt_len(base: int, rng) -> int:
    """Variable-length BPTT window: mostly ``base``, occasionally ``base / 2``."""
    mean = base if rng.random() < 0.95 else base / 2
    seq_len = int(round(rng.normal(mean, 5)))
    return max(5, min(base + 20, seq_len))


def generate_synthetic_corpus(vocab_size: int, length: int, seed: int, *,
                              transition: np.ndarray | None = None,
                              rank: int = 2, sharpness: float = 5.0,
                              ) -> tuple[list[str], np.ndarray]:
    """Sample ``length`` tokens ``t0 .. t{V-1}`` from a first-order Markov chain.

    Unless ``transition`` is given, the chain is drawn from ``seed``: its
    logits are a random rank-``rank`` product scaled by ``sharpness``, so
    rows are peaked but share structure. Returns the tokens and the exact
    row-stochastic transition matrix.
    """
    if vocab_size < 2 or length < 1:
        raise ValueError("need vocab_size >= 2 and length >= 1")
    rng = np.random.default_rng(seed)
    if transition is None:
        left = rng.normal(size=(vocab_size, rank))
        right = rng.normal(size=(vocab_size, rank))
        logits = sharpness * (left @ right.T) / math.sqrt(rank)
        logits -= logits.max(axis=1, keepdims=True)
        transition = np.exp(logits)
        transition /= transition.sum(axis=1, keepdims=True)
    else:
        transition = np.asarray(transition, dtype=np.float64)
        if transition.shape != (vocab_size, vocab_size):
            raise ValueError("transition matrix must be vocab_size x vocab_size")
    cdf = np.cumsum(transition, axis=1)
    cdf[:, -1] = 1.0
    draws = rng.random(length)
    states = np.empty(length, dtype=np.int64)
    state = 0
    for i in range(length):
        states[i] = state
        state = int(np.searchsorted(cdf[state], draws[i], side="right"))
    return [f"t{s}" for s in states], transition


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(transition.T)
    pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return pi / pi.sum()


def entropy_rate(transition: np.ndarray) -> float:
    """Conditional entropy (nats/token) of a stationary Markov chain."""
    pi = stationary_distribution(transition)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(transition > 0, transition * np.log(transition), 0.0)
    return float(-(pi * terms.sum(axis=1)).sum())
