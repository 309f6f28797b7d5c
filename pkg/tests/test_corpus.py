import os
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from qeadapt.corpus import (LEXICAL_CLASSES, PHONE_CLASSES, SILENCE_ID, Corpus, CorpusSpec,
                            NoiseCondition, SpeakerProfile, Utterance, build_lexicon,
                            check_split_hygiene, cmvn_per_speaker, gen_corpus,
                            generator_alignment, read_corpus, read_frames, read_lexicon,
                            synthesize_utterance, write_corpus, write_frames, write_lexicon)


def small_spec(**kw):
    base = dict(seed=3, n_speakers={"train": 4, "dev": 4, "test": 4},
                n_utts={"train": 24, "dev": 12, "test": 12})
    base.update(kw)
    return CorpusSpec(**base)


# --- lexicon ------------------------------------------------------------------------------

def test_lexicon_shape_and_homophones():
    lex = build_lexicon(1, 20, 10)
    assert len(lex) == 21
    assert [t.id for t in lex.tokens] == list(range(21))
    assert sum(t.id == SILENCE_ID for t in lex.tokens) == 1
    assert all(t.phones and 1 <= t.n_states <= 3 for t in lex.tokens)
    assert any(lex.homophones(w) for w in lex.word_ids)
    assert {t.lexical_class for t in lex.tokens[1:]} == set(LEXICAL_CLASSES)


def test_lexicon_deterministic():
    a, b = build_lexicon(1, 20, 10), build_lexicon(1, 20, 10)
    assert a.tokens == b.tokens
    assert_array_equal(a.state_means, b.state_means)


def test_small_lexicon_covers_every_class():
    lex = build_lexicon(2, 5, 5)
    assert len(lex.word_ids) == 5
    assert sorted(lex[w].lexical_class for w in lex.word_ids) == sorted(LEXICAL_CLASSES)
    assert set(lex.phone_classes.values()) >= set(PHONE_CLASSES)


def test_lexicon_rejects_small_vocab():
    with pytest.raises(ValueError):
        build_lexicon(0, 4, 10)


def test_homophones_share_acoustics():
    lex = build_lexicon(1, 20, 10)
    for w in lex.word_ids:
        for h in lex.homophones(w):
            assert_array_equal(lex.state_means[lex.states_of(w)], lex.state_means[lex.states_of(h)])


def test_lexicon_roundtrip(tmp_path):
    lex = build_lexicon(4, 20, 10)
    write_lexicon(lex, tmp_path / "lex.tsv")
    back = read_lexicon(tmp_path / "lex.tsv")
    assert back.tokens == lex.tokens
    assert back.phone_classes == lex.phone_classes
    assert_array_equal(back.state_means, lex.state_means)


# --- utterances ---------------------------------------------------------------------------

def test_frame_count_arithmetic():
    lex = build_lexicon(1, 20, 10)
    two_state = [w for w in lex.word_ids if lex[w].n_states == 2][:3]
    assert len(two_state) == 3
    utt = synthesize_utterance(lex, two_state, SpeakerProfile.identity("s", lex.dim),
                               NoiseCondition.clean("c", lex.dim), frames_per_state=4)
    assert utt.n_frames == 24


def test_zero_noise_frames_are_state_means():
    lex = build_lexicon(1, 20, 10)
    ref = [SILENCE_ID, 3, 5, 7, SILENCE_ID]
    utt = synthesize_utterance(lex, ref, SpeakerProfile.identity("s", lex.dim),
                               NoiseCondition.clean("c", lex.dim), 3, emission_stddev=0.0)
    assert_array_equal(utt.frames, lex.state_means[generator_alignment(lex, ref, 3)])


def test_synthesis_deterministic():
    lex = build_lexicon(1, 20, 10)
    spk = SpeakerProfile("s", np.full(lex.dim, 0.3), np.full(lex.dim, 1.2))
    cond = NoiseCondition("c", np.full(lex.dim, -0.1), 1.3)
    a = synthesize_utterance(lex, [1, 2, 3], spk, cond, seed=9)
    b = synthesize_utterance(lex, [1, 2, 3], spk, cond, seed=9)
    assert_array_equal(a.frames, b.frames)


def test_synthesis_errors():
    lex = build_lexicon(1, 20, 10)
    spk, cond = SpeakerProfile.identity("s", lex.dim), NoiseCondition.clean("c", lex.dim)
    with pytest.raises(KeyError):
        synthesize_utterance(lex, [1, 99], spk, cond)
    with pytest.raises(ValueError):
        synthesize_utterance(lex, [], spk, cond)
    with pytest.raises(ValueError):
        SpeakerProfile("s", np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        NoiseCondition("c", np.zeros(2), 0.5)


# --- corpora ------------------------------------------------------------------------------

def test_speakers_disjoint_across_splits():
    c = gen_corpus(small_spec())
    sets = [set(c[s].speakers) for s in ("train", "dev", "test")]
    assert all(len(s) == 4 for s in sets)
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    check_split_hygiene(c.train, c.dev, c.test)


def test_split_hygiene_detects_overlap():
    c = gen_corpus(small_spec())
    leaked = Corpus("dev", c.dev.utterances + c.train.utterances[:1], "dev")
    with pytest.raises(ValueError):
        check_split_hygiene(c.train, leaked)


def test_zero_mismatch_means_no_test_offsets():
    c = gen_corpus(small_spec(mismatch=0.0))
    for spk in c.dev.speakers + c.test.speakers:
        assert_array_equal(c.speakers[spk].offset, 0.0)
        assert_array_equal(c.speakers[spk].scale, 1.0)


def test_mismatch_scales_test_offsets():
    lo = gen_corpus(small_spec(mismatch=0.5))
    hi = gen_corpus(small_spec(mismatch=1.0))
    for spk in lo.test.speakers:
        assert_allclose(hi.speakers[spk].offset, 2 * lo.speakers[spk].offset)


def test_four_conditions():
    c = gen_corpus(small_spec())
    assert len(c.conditions) == 4
    assert all(cond.inflation >= 1 for cond in c.conditions.values())


def test_gen_corpus_deterministic_on_disk(tmp_path):
    for run in ("a", "b"):
        c = gen_corpus(small_spec())
        write_corpus(c.test, tmp_path / run, c.lexicon)
    manifest = [(tmp_path / r / "manifest.tsv").read_bytes() for r in ("a", "b")]
    assert manifest[0] == manifest[1]
    for name in os.listdir(tmp_path / "a" / "frames"):
        assert (tmp_path / "a" / "frames" / name).read_bytes() == \
            (tmp_path / "b" / "frames" / name).read_bytes()


def test_gen_corpus_validation():
    with pytest.raises(ValueError):
        gen_corpus(small_spec(n_speakers={"train": 1, "dev": 0, "test": 1}))
    with pytest.raises(ValueError):
        gen_corpus(small_spec(length_range=(4, 2)))


def test_references_use_silence_only_as_pauses():
    c = gen_corpus(small_spec())
    for utt in c.train:
        assert utt.reference[0] == SILENCE_ID and utt.reference[-1] == SILENCE_ID
        inner = utt.reference[1:-1]
        assert all(not (a == SILENCE_ID and b == SILENCE_ID) for a, b in zip(inner, inner[1:]))
        assert 3 <= len(utt.words) <= 8


# --- frames files -------------------------------------------------------------------------

def test_frames_file_layout(tmp_path):
    frames = np.arange(6, dtype=float).reshape(3, 2) / 4
    write_frames(tmp_path / "x.frm", frames)
    raw = (tmp_path / "x.frm").read_bytes()
    assert raw[:4] == b"FRM1"
    assert int.from_bytes(raw[4:8], "little") == 3
    assert int.from_bytes(raw[8:12], "little") == 2
    assert raw[12:16] == b"\0" * 4
    assert len(raw) == 16 + 6 * 4
    assert_array_equal(read_frames(tmp_path / "x.frm"), frames)


def test_corpus_roundtrip(tmp_path):
    c = gen_corpus(small_spec())
    write_corpus(c.dev, tmp_path, c.lexicon)
    back = read_corpus(tmp_path, c.lexicon, "dev", "dev")
    assert [u.id for u in back] == [u.id for u in c.dev]
    for a, b in zip(back, c.dev):
        assert a.reference == b.reference
        assert_allclose(a.frames, b.frames, atol=1e-5)


def test_truncated_frames_file_rejected(tmp_path):
    write_frames(tmp_path / "x.frm", np.ones((4, 2)))
    data = (tmp_path / "x.frm").read_bytes()
    (tmp_path / "x.frm").write_bytes(data[:-4])
    with pytest.raises(ValueError):
        read_frames(tmp_path / "x.frm")


# --- cmvn ---------------------------------------------------------------------------------

def _per_speaker_stats(corpus):
    out = {}
    for spk in corpus.speakers:
        x = np.concatenate([u.frames for u in corpus if u.speaker == spk])
        out[spk] = (x.mean(axis=0), x.var(axis=0))
    return out


def test_cmvn_statistics():
    c = gen_corpus(small_spec())
    for mean, var in _per_speaker_stats(cmvn_per_speaker(c.test)).values():
        assert np.all(np.abs(mean) < 1e-9)
        assert np.all(np.abs(var - 1) < 1e-9)


def test_cmvn_idempotent_on_standardized_data():
    c = gen_corpus(small_spec())
    once = cmvn_per_speaker(c.test)
    twice = cmvn_per_speaker(once)
    for a, b in zip(once, twice):
        assert_allclose(a.frames, b.frames, atol=1e-12)


def test_cmvn_constant_dimension_is_centred_only():
    frames = np.column_stack([np.full(10, 3.0), np.arange(10.0)])
    corpus = Corpus("x", [Utterance("s_0", "s", "c", frames)], "test")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = cmvn_per_speaker(corpus).utterances[0].frames
    assert any("zero-variance" in str(w.message) for w in caught)
    assert_array_equal(out[:, 0], 0.0)
    assert abs(out[:, 1].var() - 1) < 1e-12


def test_cmvn_returns_copy():
    c = gen_corpus(small_spec())
    before = c.test.utterances[0].frames.copy()
    cmvn_per_speaker(c.test)
    assert_array_equal(c.test.utterances[0].frames, before)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3), st.floats(0.1, 5.0))
def test_cmvn_property(seed, n_spk, spread):
    rng = np.random.default_rng(seed)
    utts = []
    for s in range(n_spk):
        for k in range(3):
            frames = rng.normal(rng.normal(0, spread, 4), spread, (int(rng.integers(2, 8)), 4))
            utts.append(Utterance(f"s{s}_{k}", f"s{s}", "c", frames))
    for mean, var in _per_speaker_stats(cmvn_per_speaker(Corpus("x", utts))).values():
        assert np.all(np.abs(mean) < 1e-9)
        assert np.all(np.abs(var - 1) < 1e-9)
