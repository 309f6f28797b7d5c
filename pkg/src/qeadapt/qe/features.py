"""Sentence-level quality-estimation features.

41 values per utterance in three groups: confusion-network statistics (9),
whole-sentence text statistics (10) and word-level statistics (22).  Per-bin
and per-word quantities are averaged to one number per sentence.
"""

from __future__ import annotations

import re

import numpy as np

from ..corpus import LEXICAL_CLASSES, PHONE_CLASSES, SILENCE_ID
from ..ngram import BOS, NgramLm, logprob, train_lm

CN_FEATURES = [
    "cn_log_first", "cn_log_first_prev", "cn_log_first_next",
    "cn_log_mean", "cn_log_std", "cn_log_min", "cn_log_max",
    "cn_prev_is_sil", "cn_next_is_sil",
]
SENTENCE_FEATURES = [
    "n_words", "lm_logprob", "class_logprob", "log_ppl", "class_log_ppl",
    "pct_number", "pct_non_alpha", "pct_content", "pct_noun", "pct_verb",
]
WORD_FEATURES = [
    "class_prev", "class_cur", "class_next",
    "class_score_prev", "class_score_cur", "class_score_next",
    "lm2_in", "lm2_out", "ngram_in", "ngram_out",
] + [f"n_{c}" for c in PHONE_CLASSES] + [
    "n_homophones", "n_neighbors",
    "is_stop", "before_rep", "after_rep", "before_sil", "after_sil",
]
FEATURE_NAMES = CN_FEATURES + SENTENCE_FEATURES + WORD_FEATURES
N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 41

_ALPHA = re.compile(r"[a-z]+")
_POSTERIOR_FLOOR = 1e-10


def class_index(lexicon, token_id) -> int:
    return LEXICAL_CLASSES.index(lexicon[token_id].lexical_class)


def class_sequence(lexicon, words) -> list[int]:
    return [class_index(lexicon, w) for w in words]


def _cn_features(cn) -> list[float]:
    bins = cn.bins
    if not bins:
        return [0.0] * len(CN_FEATURES)
    logs = [np.log(np.maximum([p for _, p in b], _POSTERIOR_FLOOR)) for b in bins]
    first = np.array([lp[0] for lp in logs])
    first_is_sil = np.array([b[0][0] == SILENCE_ID for b in bins], dtype=float)
    prev_first = np.concatenate([[0.0], first[:-1]])
    next_first = np.concatenate([first[1:], [0.0]])
    prev_sil = np.concatenate([[0.0], first_is_sil[:-1]])
    next_sil = np.concatenate([first_is_sil[1:], [0.0]])
    return [
        first.mean(), prev_first.mean(), next_first.mean(),
        np.mean([lp.mean() for lp in logs]),
        np.mean([lp.std() for lp in logs]),
        np.mean([lp.min() for lp in logs]),
        np.mean([lp.max() for lp in logs]),
        prev_sil.mean(), next_sil.mean(),
    ]


def _sentence_features(words, lexicon, lm_in, class_lm) -> list[float]:
    n = len(words)
    if n == 0:
        return [0.0] * len(SENTENCE_FEATURES)
    classes = [lexicon[w].lexical_class for w in words]
    lp = logprob(lm_in, words)
    clp = logprob(class_lm, class_sequence(lexicon, words))
    surfaces = lexicon.surfaces(words)
    return [
        float(n), lp, clp, -lp / (n + 1), -clp / (n + 1),
        classes.count("number") / n,
        sum(_ALPHA.fullmatch(s) is None for s in surfaces) / n,
        sum(c != "function" for c in classes) / n,
        classes.count("noun") / n,
        classes.count("verb") / n,
    ]


def _word_features(tokens, lexicon, lm_in, lm_out, class_lm) -> list[float]:
    words = [t for t in tokens if t != SILENCE_ID]
    if not words:
        return [0.0] * len(WORD_FEATURES)
    n = len(words)
    cls = class_sequence(lexicon, words)
    # class tags shifted by one so that 0 can mean "no word here"
    tag = [c + 1 for c in cls]
    score = [class_lm.cond_prob(c, [BOS] + cls[:i]) for i, c in enumerate(cls)]

    # silence neighbours come from the token sequence, which keeps silences
    sil_before, sil_after = [], []
    for i, t in enumerate(tokens):
        if t == SILENCE_ID:
            continue
        sil_after.append(float(i > 0 and tokens[i - 1] == SILENCE_ID))
        sil_before.append(float(i + 1 < len(tokens) and tokens[i + 1] == SILENCE_ID))

    rows = []
    for i, w in enumerate(words):
        hist = [BOS] + words[:i]
        tok = lexicon[w]
        phone_counts = [sum(lexicon.phone_classes.get(p) == c for p in tok.phones)
                        for c in PHONE_CLASSES]
        rows.append([
            tag[i - 1] if i > 0 else 0, tag[i], tag[i + 1] if i + 1 < n else 0,
            score[i - 1] if i > 0 else 0.0, score[i], score[i + 1] if i + 1 < n else 0.0,
            lm_in.cond_prob(w, hist[-1:]), lm_out.cond_prob(w, hist[-1:]),
            lm_in.cond_prob(w, hist), lm_out.cond_prob(w, hist),
            *phone_counts,
            len(lexicon.homophones(w)), len(lexicon.neighbors(w)),
            float(tok.lexical_class == "function"),
            float(i + 1 < n and words[i + 1] == w),
            float(i > 0 and words[i - 1] == w),
            sil_before[i], sil_after[i],
        ])
    return list(np.mean(np.asarray(rows, dtype=float), axis=0))


def extract_features(utterance, hypothesis, cn, lm_in: NgramLm, lm_out: NgramLm,
                     class_lm: NgramLm, lexicon) -> np.ndarray:
    """41-dimensional feature vector for one decoded utterance.

    ``lm_in``/``lm_out`` are in- and out-of-domain word n-gram models,
    ``class_lm`` is an n-gram model over lexical-class indices.
    ``utterance`` is accepted for interface symmetry; only the decode
    outputs are used.
    """
    tokens = list(hypothesis.tokens)
    words = [t for t in tokens if t != SILENCE_ID]
    vec = (_cn_features(cn)
           + _sentence_features(words, lexicon, lm_in, class_lm)
           + _word_features(tokens, lexicon, lm_in, lm_out, class_lm))
    out = np.asarray(vec, dtype=float)
    if out.shape != (N_FEATURES,) or not np.all(np.isfinite(out)):
        raise FloatingPointError("feature vector is not 41 finite values")
    return out


def train_class_lm(transcripts, lexicon, order: int = 2) -> NgramLm:
    return train_lm([class_sequence(lexicon, t) for t in transcripts], order=order)


def format_features(rows) -> str:
    """``utt-id f1 ... f41`` lines, tab separated."""
    lines = []
    for uid, vec in rows:
        lines.append(uid + "\t" + "\t".join(f"{v:.10g}" for v in vec) + "\n")
    return "".join(lines)


def parse_features(text: str):
    ids, mat = [], []
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        ids.append(parts[0])
        mat.append([float(v) for v in parts[1:]])
    return ids, np.asarray(mat, dtype=float).reshape(len(ids), -1)
