import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awdlm.corpus import (BOS_ID, EOS_ID, SPECIALS, UNK_ID, StreamTooShort, Vocabulary, batchify,
                          build_vocab, encode_documents, entropy_rate, generate_synthetic_corpus,
                          numericalize, read_corpus_dir, sample_bptt_len, tokenize)


def test_tokenize_examples():
    assert tokenize("ক খ  গ") == ["ক", "খ", "গ"]
    assert tokenize("") == []
    assert tokenize("a b a c") == ["a", "b", "a", "c"]
    assert tokenize("a b c\n\td") == ["a", "b", "c", "d"]


@given(st.text())
def test_tokenize_matches_character_oracle(text):
    # walk the characters and cut at every whitespace run
    tokens, cur = [], []
    for ch in text:
        if ch.isspace():
            if cur:
                tokens.append("".join(cur))
                cur = []
        else:
            cur.append(ch)
    if cur:
        tokens.append("".join(cur))
    assert tokenize(text) == tokens


def test_build_vocab_min_freq():
    vocab = build_vocab(["a", "b", "a", "c"], min_freq=2, max_vocab=60000)
    assert vocab.id_to_token == list(SPECIALS) + ["a"]
    assert vocab.counts["a"] == 2


def test_build_vocab_empty_and_cap():
    assert build_vocab([], min_freq=2).id_to_token == list(SPECIALS)
    vocab = build_vocab(["x"] * 5 + ["y"] * 5 + ["z"], min_freq=1, max_vocab=6)
    assert vocab.id_to_token == list(SPECIALS) + ["x", "y"]


def test_build_vocab_ties_by_first_occurrence():
    vocab = build_vocab(["q", "p", "p", "q", "r"], min_freq=1)
    assert vocab.id_to_token[4:] == ["q", "p", "r"]


@settings(max_examples=50)
@given(st.lists(st.sampled_from("abcdefgh"), max_size=60), st.integers(1, 3), st.integers(4, 10))
def test_build_vocab_invariants(tokens, min_freq, max_vocab):
    vocab = build_vocab(tokens, min_freq, max_vocab)
    counts = Counter(tokens)
    assert vocab.id_to_token[:4] == list(SPECIALS)
    assert len(vocab) <= max_vocab
    for i, tok in enumerate(vocab.id_to_token):
        assert vocab.token_to_id[tok] == i
        if i >= 4:
            assert counts[tok] >= min_freq
    assert build_vocab(tokens, min_freq, max_vocab).id_to_token == vocab.id_to_token


def test_numericalize_and_roundtrip():
    vocab = build_vocab(["a", "b", "a", "c"], min_freq=2)
    assert numericalize(["a", "q"], vocab).tolist() == [vocab.encode("a"), UNK_ID]
    assert numericalize([], vocab).tolist() == []
    ids = numericalize(["a", "a"], vocab)
    assert vocab.decode_ids(ids) == ["a", "a"]


def test_encode_documents_wraps_bos_eos():
    vocab = build_vocab("x y x y".split(), min_freq=1)
    ids = encode_documents([["x", "y"], ["y"]], vocab)
    assert ids.tolist() == [BOS_ID, vocab.encode("x"), vocab.encode("y"), EOS_ID,
                            BOS_ID, vocab.encode("y"), EOS_ID]


def test_vocab_file_roundtrip(tmp_path):
    vocab = build_vocab("ক খ ক গ খ ক".split(), min_freq=1)
    path = tmp_path / "vocab.tsv"
    vocab.save(path)
    first = path.read_bytes()
    assert path.read_text(encoding="utf-8").splitlines()[0] == "<unk>\t0"
    loaded = Vocabulary.load(path)
    assert loaded.id_to_token == vocab.id_to_token
    assert loaded.counts == vocab.counts
    loaded.save(path)
    assert path.read_bytes() == first


def test_read_corpus_dir(tmp_path):
    (tmp_path / "b.txt").write_text("three four", encoding="utf-8")
    (tmp_path / "a.txt").write_text("one  two\n", encoding="utf-8")
    assert read_corpus_dir(tmp_path) == [["one", "two"], ["three", "four"]]
    with pytest.raises(FileNotFoundError):
        read_corpus_dir(tmp_path / "missing")


@pytest.mark.parametrize("n,batch,seg_len", [(700, 10, 70), (7, 3, 2), (5, 1, 5)])
def test_batchify_shapes(n, batch, seg_len):
    stream = np.arange(n)
    plan = batchify(stream, batch)
    assert plan.matrix.shape == (seg_len, batch)
    for b in range(batch):
        assert plan.matrix[:, b].tolist() == list(range(b * seg_len, (b + 1) * seg_len))


def test_batchify_too_short():
    with pytest.raises(StreamTooShort):
        batchify(np.arange(3), 4)


@given(st.integers(1, 300), st.integers(1, 12))
def test_batchify_preserves_adjacency(n, batch):
    if n < batch:
        return
    stream = np.arange(n) * 7 + 3
    plan = batchify(stream, batch)
    assert plan.matrix.size == batch * (n // batch)
    pos = {v: i for i, v in enumerate(stream)}
    for b in range(batch):
        col = plan.matrix[:, b]
        assert all(pos[col[i + 1]] == pos[col[i]] + 1 for i in range(len(col) - 1))


def test_segments_cover_stream_with_shifted_targets():
    plan = batchify(np.arange(200), 4, base_bptt=10)
    rng = np.random.default_rng(0)
    seen = []
    for start, x, y in plan.segments(rng):
        assert (y == x + 1).all()
        seen.extend(range(start, start + len(x)))
    assert seen == list(range(plan.n_steps - 1))


class _AtMean:
    def random(self):
        return 0.0

    def normal(self, loc, scale):
        return loc


def test_sample_bptt_len_mean_case():
    assert sample_bptt_len(70, _AtMean()) == 70


def test_sample_bptt_len_clamped():
    rng = np.random.default_rng(1)
    draws = [sample_bptt_len(70, rng) for _ in range(20000)]
    assert min(draws) >= 5 and max(draws) <= 90
    draws = [sample_bptt_len(2, rng) for _ in range(2000)]
    assert min(draws) >= 5 and max(draws) <= 22


def test_sample_bptt_len_monte_carlo_mean():
    rng = np.random.default_rng(2)
    draws = np.array([sample_bptt_len(70, rng) for _ in range(100_000)])
    assert abs(draws.mean() - (0.95 * 70 + 0.05 * 35)) < 1.0


def test_synthetic_alternation():
    toks, P = generate_synthetic_corpus(2, 6, seed=0, transition=np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert toks == ["t0", "t1", "t0", "t1", "t0", "t1"]


def test_synthetic_deterministic():
    a = generate_synthetic_corpus(20, 500, seed=3)
    b = generate_synthetic_corpus(20, 500, seed=3)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    assert np.allclose(a[1].sum(axis=1), 1.0)


def test_synthetic_bigram_frequencies_converge():
    V, n = 5, 100_000
    toks, P = generate_synthetic_corpus(V, n, seed=4, sharpness=1.0)
    ids = np.array([int(t[1:]) for t in toks])
    counts = np.zeros((V, V))
    np.add.at(counts, (ids[:-1], ids[1:]), 1)
    rows = counts.sum(axis=1, keepdims=True)
    emp = counts / rows
    sigma = np.sqrt(P * (1 - P) / rows)
    assert (np.abs(emp - P) <= 3 * sigma + 1e-12).mean() > 0.95


def test_entropy_rate_of_deterministic_and_uniform_chains():
    assert entropy_rate(np.array([[0.0, 1.0], [1.0, 0.0]])) == pytest.approx(0.0)
    assert entropy_rate(np.full((4, 4), 0.25)) == pytest.approx(math.log(4))
