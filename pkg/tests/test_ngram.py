import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awdlm.corpus import BOS_ID, EOS_ID, build_vocab, encode_documents
from awdlm.ngram import (ALPHA0_FLOOR, EmptyStream, InterpolatedBigram, MixtureWeights, UnseenContext,
                         bucket_of, count_ngrams, fit_mixture_weights, load_counts, mixture_distribution,
                         mixture_prob, mle_prob, save_counts)

A, B = 4, 5  # ids of "a" and "b" in the toy vocabulary


def brute_counts(ids, n):
    """Slide a window over the list and count, skipping eos -> bos joins."""
    out = {}
    for i in range(len(ids) - n + 1):
        gram = tuple(ids[i:i + n])
        if any(gram[j] == EOS_ID and gram[j + 1] == BOS_ID for j in range(n - 1)):
            continue
        out[gram] = out.get(gram, 0) + 1
    return out


def brute_mle(ids, context, w):
    n = len(context) + 1
    grams = brute_counts(ids, n)
    num = grams.get(tuple(context) + (w,), 0)
    den = sum(c for g, c in grams.items() if g[:-1] == tuple(context))
    return num, den


def test_counts_hand_example():
    c = count_ngrams([A, B, A, B, A])
    assert dict(c.unigram) == {(A,): 3, (B,): 2}
    assert dict(c.bigram) == {(A, B): 2, (B, A): 2}
    assert c.total_tokens == 5


def test_single_token_stream_has_only_unigrams():
    c = count_ngrams([7])
    assert dict(c.unigram) == {(7,): 1} and not c.bigram and not c.trigram


def test_empty_stream_rejected():
    with pytest.raises(EmptyStream):
        count_ngrams([])


def test_counts_respect_document_boundaries():
    vocab = build_vocab("a b c".split(), min_freq=1)
    ids = encode_documents([["a", "b"], ["c"]], vocab).tolist()
    c = count_ngrams(ids)
    assert (EOS_ID, BOS_ID) not in c.bigram
    assert all(not (g[0] == EOS_ID and g[1] == BOS_ID) and not (g[1] == EOS_ID and g[2] == BOS_ID)
               for g in c.trigram)


def test_mle_hand_example_on_a_document():
    # "a b a b a" as one document: a is followed by b, b and eos
    ids = [BOS_ID, A, B, A, B, A, EOS_ID]
    c = count_ngrams(ids)
    assert mle_prob(c, (A,), B) == pytest.approx(2 / 3, abs=0)
    assert mle_prob(c, (), A) == 3 / 7
    assert mle_prob(c, (A,), A) == 0.0
    with pytest.raises(UnseenContext):
        mle_prob(c, (9,), A)


def test_prefix_sums_match_unigrams():
    ids = [A, B, A, B, A]
    c = count_ngrams(ids)
    for (w,), n in c.unigram.items():
        total = sum(v for g, v in c.bigram.items() if g[0] == w)
        assert total == (n - 1 if w == ids[-1] else n)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([BOS_ID, EOS_ID, 4, 5, 6, 7]), min_size=1, max_size=50))
def test_counts_and_mle_match_brute_force(ids):
    c = count_ngrams(ids)
    for n, table in ((1, c.unigram), (2, c.bigram), (3, c.trigram)):
        assert dict(table) == brute_counts(ids, n)
    assert sum(c.unigram.values()) == c.total_tokens
    for ctx_len in (0, 1, 2):
        contexts = {g[:ctx_len] for g in brute_counts(ids, ctx_len + 1)}
        for ctx in contexts:
            for w in range(8):
                num, den = brute_mle(ids, ctx, w)
                if ctx_len == 0:
                    assert mle_prob(c, ctx, w) == num / len(ids)
                else:
                    assert mle_prob(c, ctx, w) == num / den
            if ctx_len:
                assert math.fsum(mle_prob(c, ctx, w) for w in range(8)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("freq,bucket", [(0, 0), (1, 1), (4, 1), (5, 2), (24, 2), (25, 3),
                                         (124, 3), (125, 4), (624, 4), (625, 5), (10**6, 5)])
def test_bucket_ranges(freq, bucket):
    c = count_ngrams([3] * freq + [9]) if freq else count_ngrams([9])
    assert bucket_of(c, 3) == bucket


def test_bucket_monotone_in_frequency():
    buckets = [bucket_of(count_ngrams([3] * f + [9]), 3) for f in range(1, 800)]
    assert buckets == sorted(buckets)


def test_uniform_only_weights():
    c = count_ngrams([A, B, A, B, A])
    w = MixtureWeights.constant([1.0, 0.0, 0.0])
    assert all(mixture_prob(c, w, p, q, 9) == 1 / 9 for p, q in product(range(9), repeat=2))


def test_bigram_only_weights_hand_example():
    c = count_ngrams([BOS_ID, A, B, A, B, A, EOS_ID])
    w = MixtureWeights.constant([0.0, 0.0, 1.0])
    assert mixture_prob(c, w, A, B, 6) == pytest.approx(2 / 3, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=2, max_size=50),
       st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3))
def test_mixture_sums_to_one_for_every_context(ids, raw):
    c = count_ngrams(ids)
    alpha = np.array(raw) / sum(raw)
    w = MixtureWeights.constant(alpha)
    for prev in range(10):
        dist = mixture_distribution(c, w, prev, 10)
        assert (dist > 0).all()
        assert abs(math.fsum(dist) - 1.0) < 1e-9


def test_em_prefers_unigram_for_context_free_data():
    # few tokens per context make the bigram estimates noisy; the unigram is exact in law
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(40))
    train = rng.choice(40, size=2000, p=probs) + 4
    held = rng.choice(40, size=5000, p=probs) + 4
    counts = count_ngrams(train, 2)
    w = fit_mixture_weights(counts, held, 44)
    seen = {bucket_of(counts, a) for a in held} - {0}
    assert seen
    assert all(w.alphas[q, 1] > 0.8 for q in seen)


def test_em_prefers_uniform_for_unseen_pairs():
    train = [4, 5] * 300  # only a -> b and b -> a
    rng = np.random.default_rng(1)
    held = rng.integers(6, 50, size=3000)  # tokens never seen in training
    counts = count_ngrams(train, 2)
    w = fit_mixture_weights(counts, held, 50)
    assert w.alphas[0].argmax() == 0 and w.alphas[0, 0] > 0.99


def test_em_log_likelihood_never_decreases():
    rng = np.random.default_rng(2)
    train = rng.integers(4, 30, size=3000)
    held = rng.integers(4, 30, size=600)
    w = fit_mixture_weights(count_ngrams(train, 2), held, 30)
    assert w.ll_history
    for trace in w.ll_history.values():
        assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))


def test_fitted_weights_lie_on_simplex_with_floor():
    train = [4, 5] * 300
    w = fit_mixture_weights(count_ngrams(train, 2), [4, 5, 4, 5, 4, 5], 6)
    assert (w.alphas[:, 0] >= ALPHA0_FLOOR * 0.999).all()
    assert np.allclose(w.alphas.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(w.alphas[0], 1 / 3)  # empty bucket


def test_invalid_weights_rejected():
    with pytest.raises(ValueError):
        MixtureWeights(np.array([[0.5, 0.5, 0.5]]))
    with pytest.raises(ValueError):
        MixtureWeights(np.array([[1.5, -0.5, 0.0]]))


def test_mixture_beats_pure_mle_bigram_on_heldout():
    rng = np.random.default_rng(3)
    P = rng.dirichlet(np.full(20, 0.3), size=20)
    ids = [0]
    for _ in range(6000):
        ids.append(int(rng.choice(20, p=P[ids[-1]])))
    ids = np.array(ids) + 4
    train, test = ids[:5000], ids[5000:]
    model = InterpolatedBigram.fit(train, 24)
    counts = count_ngrams(train, 2)
    pure = MixtureWeights.constant([ALPHA0_FLOOR, 0.0, 1 - ALPHA0_FLOOR])
    mix_nll = -model.token_log_probs(test).mean()
    mle_nll = -np.mean([math.log(mixture_prob(counts, pure, a, b, 24)) for a, b in zip(test, test[1:])])
    assert mix_nll <= mle_nll


def test_counts_and_weights_roundtrip(tmp_path):
    tokens = "ক খ ক গ খ ক ঘ".split()
    vocab = build_vocab(tokens, min_freq=1)
    ids = encode_documents([tokens[:4], tokens[4:]], vocab)
    model = InterpolatedBigram(count_ngrams(ids), MixtureWeights.constant([0.2, 0.3, 0.5]), len(vocab))
    model.save(tmp_path, vocab)
    first = (tmp_path / "counts.tsv").read_bytes()
    lines = (tmp_path / "counts.tsv").read_text(encoding="utf-8").splitlines()
    assert lines == sorted(lines) and "ক খ\t1" in lines
    loaded = InterpolatedBigram.load(tmp_path, vocab)
    assert dict(loaded.counts.bigram) == dict(model.counts.bigram)
    assert dict(loaded.counts.trigram) == dict(model.counts.trigram)
    assert np.array_equal(loaded.weights.alphas, model.weights.alphas)
    save_counts(loaded.counts, vocab, tmp_path / "again.tsv")
    assert (tmp_path / "again.tsv").read_bytes() == first
    assert load_counts(tmp_path / "again.tsv", vocab).total_tokens == len(ids)


def test_document_order_does_not_change_perplexity():
    from awdlm.evaluate import perplexity
    rng = np.random.default_rng(4)
    train = rng.integers(4, 12, size=500)
    model = InterpolatedBigram.fit(train, 12)
    docs = [[BOS_ID, *rng.integers(4, 12, size=n), EOS_ID] for n in (5, 9, 3)]
    fwd = perplexity(model, np.concatenate(docs))
    rev = perplexity(model, np.concatenate(docs[::-1]))
    assert fwd.token_count == rev.token_count
    assert fwd.mean_nll == pytest.approx(rev.mean_nll, rel=1e-12)
