import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from qeadapt.ngram import (BOS, EOS, UNK, NgramLm, dump_lm, load_lm, logprob, perplexity,
                           sample_sentence, train_lm)


def random_corpus(rng, vocab=8, n=40):
    return [list(rng.integers(0, vocab, int(rng.integers(1, 8)))) for _ in range(n)]


def test_hand_computed_kn_bigram():
    # two copies of "a b", d = 0.75; lower order uses continuation counts
    # unigram level: a, b, </s> each have one distinct left context; 4 predictable tokens
    d = 0.75
    p_uni_b = (1 - d) / 3 + d * 3 / 3 / 4
    # bigram level: c(a b) = 2, one continuation type after "a"
    p_b_given_a = (2 - d) / 2 + d * 1 / 2 * p_uni_b
    lm = train_lm([["a", "b"], ["a", "b"]], order=2, discount=d)
    assert_allclose(lm.cond_prob("b", ["a"]), p_b_given_a, rtol=1e-12)
    assert_allclose(p_b_given_a, 0.7265625)


def test_unigram_normalized_and_dominated():
    lm = train_lm([["a", "a", "a"]], order=1, discount=0.5)
    dist = lm.distribution()
    assert abs(sum(dist.values()) - 1) < 1e-8
    assert dist["a"] == max(dist.values())


def test_order1_logprob_is_sum_of_unigrams():
    lm = train_lm([[1, 2, 3], [2, 2]], order=1)
    seq = [2, 3, 1, 7]
    expected = sum(lm.cond_logprob(w) for w in seq) + lm.cond_logprob(EOS)
    assert_allclose(logprob(lm, seq), expected, rtol=1e-12)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_normalization_on_observed_histories(order):
    rng = np.random.default_rng(order)
    corpus = random_corpus(rng)
    lm = train_lm(corpus, order=order)
    histories = set()
    for sent in corpus:
        padded = [BOS] + sent
        for i in range(1, len(padded) + 1):
            histories.add(tuple(padded[max(0, i - order + 1):i]))
    histories = sorted(histories, key=str)[:200]
    for h in histories:
        total = sum(lm.distribution(list(h)).values())
        assert abs(total - 1) < 1e-8, h


def test_unseen_histories_and_words_still_normalize():
    lm = train_lm(random_corpus(np.random.default_rng(0)), order=3)
    assert abs(sum(lm.distribution([99, 98]).values()) - 1) < 1e-8
    assert lm.cond_prob(12345, [1]) == lm.cond_prob(UNK, [1]) > 0


def test_repeated_sentence_perplexity_near_one():
    sent = [3, 1, 4, 1, 5]
    lm = train_lm([sent] * 50, order=3)
    assert perplexity(lm, sent) < 1.5


def test_uniform_prior_perplexity():
    # V - 1 words plus the end marker: V equally likely tokens
    V = 7
    lm = NgramLm.uniform(range(V - 1))
    assert_allclose(perplexity(lm, [0, 3, 5]), V)


def test_appending_never_increases_prefix_logprob():
    lm = train_lm(random_corpus(np.random.default_rng(1)), order=2)
    seq = [1, 2, 3, 4]
    prefix = [0.0]
    hist = [BOS]
    for w in seq:
        prefix.append(prefix[-1] + lm.cond_logprob(w, hist))
        hist.append(w)
    assert all(b <= a for a, b in zip(prefix, prefix[1:]))


def test_perplexity_definition():
    lm = train_lm(random_corpus(np.random.default_rng(2)), order=2)
    seq = [1, 5, 2]
    assert_allclose(perplexity(lm, seq), math.exp(-logprob(lm, seq) / 4))
    with pytest.raises(ValueError):
        perplexity(lm, [])


def test_higher_order_fits_training_set_better():
    corpus = random_corpus(np.random.default_rng(3), n=80)
    flat = [w for s in corpus for w in s]
    ppl = {}
    for order in (1, 2, 3):
        lm = train_lm(corpus, order=order)
        lp = sum(logprob(lm, s) for s in corpus)
        ppl[order] = math.exp(-lp / (len(flat) + len(corpus)))
    assert ppl[3] <= ppl[2] <= ppl[1]


def test_training_validation():
    with pytest.raises(ValueError):
        train_lm([], order=2)
    with pytest.raises(ValueError):
        train_lm([[1]], order=4)
    with pytest.raises(ValueError):
        train_lm([[1]], discount=1.0)


def test_sampling():
    lm = train_lm([["a", "b"]], order=2)
    assert sample_sentence(lm, 0) == ["a", "b"]
    lm = train_lm(random_corpus(np.random.default_rng(4)), order=3)
    assert sample_sentence(lm, 11) == sample_sentence(lm, 11)
    assert len(sample_sentence(lm, 5, max_len=1)) <= 1
    one = train_lm([[1, 2, 3]] * 3, order=2)
    assert sample_sentence(one, 0, max_len=1) == [1]


def test_dump_format_and_roundtrip(tmp_path):
    lm = train_lm(random_corpus(np.random.default_rng(5)), order=3)
    dump_lm(lm, tmp_path / "lm.txt")
    lines = (tmp_path / "lm.txt").read_text().splitlines()
    assert lines[0] == "NGRAM 3 0.75"
    k, *rest = lines[1].split()
    assert 1 <= int(k) <= 3 and len(rest) == int(k) + 2
    back = load_lm(tmp_path / "lm.txt")
    for h in ([BOS], [1], [1, 2], [BOS, 3], [77]):
        for w in list(range(8)) + [EOS, 42]:
            assert_allclose(back.cond_logprob(w, h), lm.cond_logprob(w, h), rtol=1e-10)


def test_uniform_dump_roundtrip(tmp_path):
    lm = NgramLm.uniform([1, 2, 3])
    dump_lm(lm, tmp_path / "u.txt")
    back = load_lm(tmp_path / "u.txt")
    assert_allclose(perplexity(back, [1, 2]), 4)


def test_bad_header(tmp_path):
    (tmp_path / "x").write_text("ARPA 2\n")
    with pytest.raises(ValueError):
        load_lm(tmp_path / "x")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(0, 5), min_size=1, max_size=6), min_size=1, max_size=10),
       st.integers(1, 3), st.floats(0.05, 0.95),
       st.lists(st.integers(0, 7), min_size=0, max_size=2))
def test_normalization_property(corpus, order, discount, history):
    lm = train_lm(corpus, order=order, discount=discount)
    probs = lm.distribution([BOS] + history)
    assert abs(sum(probs.values()) - 1) < 1e-8
    assert all(np.isfinite(math.log(p)) for p in probs.values())
