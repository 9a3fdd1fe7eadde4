"""Count-based language models: MLE n-grams and the interpolated bi-gram mixture."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import BOS_ID, EOS_ID, Vocabulary

# geometric ranges over the context word's frequency: {0}, [1,5), [5,25), ...
BUCKET_EDGES = (1, 5, 25, 125, 625)
N_BUCKETS = len(BUCKET_EDGES) + 1
ALPHA0_FLOOR = 1e-6


class EmptyStream(ValueError):
    pass


class UnseenContext(KeyError):
    pass


@dataclass
class NGramCounts:
    unigram: Counter
    bigram: Counter
    trigram: Counter
    total_tokens: int
    # continuation totals: sum_w count(context, w)
    context_total: Counter = field(default_factory=Counter)

    def count(self, ngram: tuple[int, ...]) -> int:
        table = {1: self.unigram, 2: self.bigram, 3: self.trigram}[len(ngram)]
        return table.get(ngram, 0)


def _crosses_boundary(window) -> bool:
    return any(a == EOS_ID and b == BOS_ID for a, b in zip(window, window[1:]))


def count_ngrams(stream, max_order: int = 3) -> NGramCounts:
    """Count all n-grams up to ``max_order``; none spans an eos -> bos join."""
    ids = [int(x) for x in stream]
    if not ids:
        raise EmptyStream("cannot count an empty stream")
    tables = {1: Counter(), 2: Counter(), 3: Counter()}
    for n in range(1, max_order + 1):
        table = tables[n]
        for i in range(len(ids) - n + 1):
            window = tuple(ids[i:i + n])
            if n > 1 and _crosses_boundary(window):
                continue
            table[window] += 1
    return NGramCounts(tables[1], tables[2], tables[3], len(ids), _context_totals(tables))


def _context_totals(tables) -> Counter:
    totals: Counter = Counter()
    for table in (tables[2], tables[3]):
        for gram, c in table.items():
            totals[gram[:-1]] += c
    return totals


def mle_prob(counts: NGramCounts, context: tuple[int, ...], w: int) -> float:
    """count(context, w) / sum_v count(context, v)."""
    context = tuple(int(c) for c in context)
    if len(context) > 2:
        raise ValueError("context longer than two tokens")
    if not context:
        return counts.unigram.get((w,), 0) / counts.total_tokens
    denom = counts.context_total.get(context, 0)
    if denom == 0:
        raise UnseenContext(context)
    return counts.count(context + (w,)) / denom


def bucket_of(counts: NGramCounts, context_id: int) -> int:
    freq = counts.unigram.get((int(context_id),), 0)
    q = 0
    for edge in BUCKET_EDGES:
        if freq >= edge:
            q += 1
    return q


@dataclass
class MixtureWeights:
    alphas: np.ndarray  # [buckets x 3]: uniform, unigram, bigram
    ll_history: dict[int, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.alphas.ndim != 2 or self.alphas.shape[1] != 3:
            raise ValueError("alphas must be [buckets x 3]")
        if (self.alphas < 0).any() or not np.allclose(self.alphas.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("each bucket's weights must lie on the simplex")

    @classmethod
    def constant(cls, alpha, n_buckets: int = N_BUCKETS) -> "MixtureWeights":
        return cls(np.tile(np.asarray(alpha, dtype=np.float64), (n_buckets, 1)))

    def save(self, path: str | Path) -> None:
        lines = [f"{q} {float(a0)!r} {float(a1)!r} {float(a2)!r}" for q, (a0, a1, a2) in enumerate(self.alphas)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MixtureWeights":
        rows = []
        for line in Path(path).read_text(encoding="utf-8").split("\n"):
            if line.strip():
                _, *vals = line.split()
                rows.append([float(v) for v in vals])
        return cls(np.array(rows))


def _components(counts: NGramCounts, w_prev: int, w: int, vocab_size: int) -> tuple[float, float, float]:
    p0 = 1.0 / vocab_size
    p1 = counts.unigram.get((w,), 0) / counts.total_tokens
    denom = counts.context_total.get((w_prev,), 0)
    # a context never continued in training falls back to the unigram
    p2 = counts.bigram.get((w_prev, w), 0) / denom if denom else p1
    return p0, p1, p2


def mixture_prob(counts: NGramCounts, weights: MixtureWeights, w_prev: int, w: int,
                 vocab_size: int) -> float:
    alpha = weights.alphas[bucket_of(counts, w_prev)]
    return float(np.dot(alpha, _components(counts, int(w_prev), int(w), vocab_size)))


def mixture_distribution(counts: NGramCounts, weights: MixtureWeights, w_prev: int,
                         vocab_size: int) -> np.ndarray:
    """Full next-token distribution after ``w_prev`` as a length-|V| vector."""
    return np.array([mixture_prob(counts, weights, w_prev, w, vocab_size) for w in range(vocab_size)])


def _heldout_pairs(heldout):
    ids = [int(x) for x in heldout]
    return [(a, b) for a, b in zip(ids, ids[1:]) if not (a == EOS_ID and b == BOS_ID)]


def fit_mixture_weights(counts: NGramCounts, heldout, vocab_size: int,
                        n_buckets: int = N_BUCKETS, tol: float = 1e-6,
                        max_iter: int = 200) -> MixtureWeights:
    """Per-bucket EM over held-out bigrams (deleted interpolation).

    Buckets without held-out data keep equal weights. The uniform weight is
    floored at 1e-6 so every pair keeps a nonzero probability.
    """
    pairs = _heldout_pairs(heldout)
    if not pairs:
        raise EmptyStream("held-out data has no bigrams")
    by_bucket: dict[int, list] = defaultdict(list)
    for a, b in pairs:
        by_bucket[bucket_of(counts, a)].append(_components(counts, a, b, vocab_size))
    alphas = np.full((n_buckets, 3), 1.0 / 3.0)
    history: dict[int, list[float]] = {}
    for q, rows in by_bucket.items():
        alphas[q], history[q] = _em(np.array(rows), tol, max_iter)
    alphas[:, 0] = np.maximum(alphas[:, 0], ALPHA0_FLOOR)
    alphas /= alphas.sum(axis=1, keepdims=True)
    return MixtureWeights(alphas, history)


def _em(comp: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, list[float]]:
    """Mixture weights maximising sum(log(comp @ alpha)); returns the LL trace too."""
    alpha = np.full(3, 1.0 / 3.0)
    trace = []
    for _ in range(max_iter):
        weighted = comp * alpha
        total = np.maximum(weighted.sum(axis=1), 1e-300)
        trace.append(float(np.log(total).sum()))
        new = (weighted / total[:, None]).mean(axis=0)
        new /= new.sum()
        delta = np.abs(new - alpha).max()
        alpha = new
        if delta < tol:
            break
    trace.append(float(np.log(np.maximum(comp @ alpha, 1e-300)).sum()))
    return alpha, trace


class InterpolatedBigram:
    """Bi-gram mixture of uniform, unigram and bigram estimates."""

    def __init__(self, counts: NGramCounts, weights: MixtureWeights, vocab_size: int):
        self.counts = counts
        self.weights = weights
        self.vocab_size = vocab_size

    @classmethod
    def fit(cls, stream, vocab_size: int, heldout_frac: float = 0.1) -> "InterpolatedBigram":
        """Fit weights on the last ``heldout_frac`` of ``stream``, then recount on all of it."""
        stream = np.asarray(stream)
        cut = int(round(len(stream) * (1 - heldout_frac)))
        if cut < 1 or cut >= len(stream) - 1:
            raise EmptyStream("stream too short to split off held-out data")
        weights = fit_mixture_weights(count_ngrams(stream[:cut], 2), stream[cut:], vocab_size)
        return cls(count_ngrams(stream, 2), weights, vocab_size)

    def prob(self, w_prev: int, w: int) -> float:
        return mixture_prob(self.counts, self.weights, w_prev, w, self.vocab_size)

    def token_log_probs(self, stream) -> np.ndarray:
        ids = [int(x) for x in stream]
        out = np.empty(max(len(ids) - 1, 0))
        for t in range(1, len(ids)):
            p = self.prob(ids[t - 1], ids[t])
            out[t - 1] = math.log(p) if p > 0 else -math.inf
        return out

    def save(self, directory: str | Path, vocab: Vocabulary) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_counts(self.counts, vocab, d / "counts.tsv")
        self.weights.save(d / "weights.txt")

    @classmethod
    def load(cls, directory: str | Path, vocab: Vocabulary) -> "InterpolatedBigram":
        d = Path(directory)
        return cls(load_counts(d / "counts.tsv", vocab), MixtureWeights.load(d / "weights.txt"), len(vocab))


def save_counts(counts: NGramCounts, vocab: Vocabulary, path: str | Path) -> None:
    """One ``w1[ w2[ w3]]<TAB>count`` line per n-gram, sorted."""
    lines = []
    for table in (counts.unigram, counts.bigram, counts.trigram):
        for gram, c in table.items():
            lines.append(f"{' '.join(vocab.decode(i) for i in gram)}\t{c}")
    lines.sort()
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_counts(path: str | Path, vocab: Vocabulary) -> NGramCounts:
    tables = {1: Counter(), 2: Counter(), 3: Counter()}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        gram_text, _, c = line.rpartition("\t")
        gram = tuple(vocab.token_to_id[t] for t in gram_text.split(" "))
        tables[len(gram)][gram] = int(c)
    total = sum(tables[1].values())
    return NGramCounts(tables[1], tables[2], tables[3], total, _context_totals(tables))
