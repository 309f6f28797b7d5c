"""Interpolated Kneser-Ney n-gram language models (orders 1-3).

Training fills ARPA-style tables (interpolated conditional probability for
every observed n-gram, back-off weight for every observed context), and all
queries go through those tables.  A model read back from a dump therefore
behaves exactly like the one that wrote it.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
_SPECIAL = (BOS, EOS, UNK)


class NgramLm:

    def __init__(self, order: int, discount: float, vocab, probs, backoffs):
        self.order = order
        self.discount = discount
        self.vocab = frozenset(vocab)
        # probs[k][ngram] / backoffs[k][context]; natural-log values
        self.probs = probs
        self.backoffs = backoffs
        self._uniform = None

    @classmethod
    def uniform(cls, vocab) -> "NgramLm":
        """Untrained prior: every word and the end marker equally likely."""
        lm = cls(1, 0.0, vocab, {1: {}}, {1: {}})
        lm._uniform = -math.log(len(lm.vocab) + 1)
        return lm

    @property
    def predictable(self) -> list:
        """Every token the model assigns probability to."""
        return sorted(self.vocab, key=_sort_key) + [EOS, UNK]

    def _map(self, token):
        return token if token in self.vocab or token in _SPECIAL else UNK

    def cond_logprob(self, word, history=()) -> float:
        """Natural-log P(word | history); history may include BOS."""
        if self._uniform is not None:
            return self._uniform
        word = self._map(word)
        ctx = tuple(self._map(h) for h in history)[-(self.order - 1):] if self.order > 1 else ()
        bow = 0.0
        while True:
            k = len(ctx) + 1
            lp = self.probs[k].get(ctx + (word,))
            if lp is not None:
                return bow + lp
            if not ctx:
                # every predictable token has a unigram entry
                raise KeyError(word)
            bow += self.backoffs[k - 1].get(ctx, 0.0)
            ctx = ctx[1:]

    def cond_prob(self, word, history=()) -> float:
        return math.exp(self.cond_logprob(word, history))

    def distribution(self, history=()) -> dict:
        return {w: self.cond_prob(w, history) for w in self.predictable}


def _sort_key(tok):
    return (0, tok, "") if isinstance(tok, (int, np.integer)) else (1, 0, str(tok))


def train_lm(transcripts, order: int = 2, discount: float = 0.75) -> NgramLm:
    """Interpolated Kneser-Ney with one fixed absolute discount."""
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    if not 0.0 < discount < 1.0:
        raise ValueError("discount must lie in (0, 1)")
    transcripts = [list(t) for t in transcripts]
    if not transcripts:
        raise ValueError("empty transcript list")

    vocab = set()
    raw = {k: defaultdict(int) for k in range(1, order + 1)}
    for sent in transcripts:
        vocab.update(sent)
        padded = [BOS] + sent + [EOS]
        for i in range(1, len(padded)):
            for k in range(1, order + 1):
                if i - k + 1 < 0:
                    break
                raw[k][tuple(padded[i - k + 1:i + 1])] += 1
    for tok in _SPECIAL:
        vocab.discard(tok)

    # numerators: raw counts at the top order and for n-grams that start
    # with BOS (they cannot be extended to the left); continuation counts
    # everywhere else
    num = {order: dict(raw[order])}
    for k in range(order - 1, 0, -1):
        cont = defaultdict(int)
        for gram in raw[k + 1]:
            cont[gram[1:]] += 1
        table = {}
        for gram, c in raw[k].items():
            table[gram] = c if gram[0] == BOS else cont[gram]
        num[k] = table

    ctx_total = {k: defaultdict(int) for k in num}
    ctx_types = {k: defaultdict(int) for k in num}
    for k, table in num.items():
        for gram, c in table.items():
            ctx_total[k][gram[:-1]] += c
            ctx_types[k][gram[:-1]] += 1

    d = discount
    n_pred = len(vocab) + 2  # words + EOS + UNK
    probs = {k: {} for k in range(1, order + 1)}
    backoffs = {k: {} for k in range(1, order + 1)}

    def interp(k, ctx, word):
        """Interpolated KN probability at level k (plain float recursion)."""
        if k == 1:
            tot = ctx_total[1][()]
            c = num[1].get((word,), 0)
            return max(c - d, 0.0) / tot + d * ctx_types[1][()] / tot / n_pred
        tot = ctx_total[k].get(ctx, 0)
        if tot == 0:
            return interp(k - 1, ctx[1:], word)
        c = num[k].get(ctx + (word,), 0)
        lower = interp(k - 1, ctx[1:], word)
        return max(c - d, 0.0) / tot + d * ctx_types[k][ctx] / tot * lower

    for word in sorted(vocab, key=_sort_key) + [EOS, UNK]:
        probs[1][(word,)] = math.log(interp(1, (), word))
    for k in range(2, order + 1):
        for gram in num[k]:
            probs[k][gram] = math.log(interp(k, gram[:-1], gram[-1]))
    for k in range(1, order):
        for ctx, tot in ctx_total[k + 1].items():
            backoffs[k][ctx] = math.log(d * ctx_types[k + 1][ctx] / tot)
    return NgramLm(order, discount, vocab, probs, backoffs)


def logprob(lm: NgramLm, tokens) -> float:
    """Natural-log probability of a sentence, end marker included."""
    history = [BOS]
    total = 0.0
    for tok in tokens:
        total += lm.cond_logprob(tok, history)
        history.append(tok)
    return total + lm.cond_logprob(EOS, history)


def perplexity(lm: NgramLm, tokens) -> float:
    tokens = list(tokens)
    if not tokens:
        raise ValueError("tokens must be non-empty")
    return math.exp(-logprob(lm, tokens) / (len(tokens) + 1))


def sample_sentence(lm: NgramLm, seed, max_len: int = 20) -> list:
    """Draw a sentence from the explicitly listed continuations.

    At each step the longest context with listed continuations is used and
    their probabilities renormalized, so a model trained on a single
    sentence reproduces it.  UNK is never emitted.
    """
    rng = np.random.default_rng(seed)
    history = [BOS]
    out = []
    while len(out) < max_len:
        ctx = tuple(history[-(lm.order - 1):]) if lm.order > 1 else ()
        while True:
            k = len(ctx) + 1
            cands = [(g[-1], lp) for g, lp in lm.probs.get(k, {}).items()
                     if g[:-1] == ctx and g[-1] != UNK]
            if cands or not ctx:
                break
            ctx = ctx[1:]
        if not cands:
            cands = [(w, 0.0) for w in lm.predictable if w != UNK]
        cands.sort(key=lambda c: _sort_key(c[0]))
        p = np.exp([lp for _, lp in cands])
        word = cands[int(rng.choice(len(cands), p=p / p.sum()))][0]
        if word == EOS:
            break
        out.append(word)
        history.append(word)
    return out


# --- text dump --------------------------------------------------------------

def _tok_str(tok) -> str:
    return str(tok)


def _tok_parse(s: str):
    return s if s in _SPECIAL else int(s)


def dump_lm(lm: NgramLm, path) -> None:
    """``NGRAM <order> <discount>`` header, then ``<k> <tokens> <log10p> <log10bow>``."""
    ln10 = math.log(10.0)
    with open(path, "w") as fh:
        if lm._uniform is not None:
            fh.write("NGRAM 0 0\n")
            for w in sorted(lm.vocab, key=_sort_key):
                fh.write(f"1 {_tok_str(w)} {lm._uniform / ln10:.12g} 0\n")
            return
        fh.write(f"NGRAM {lm.order} {lm.discount:.12g}\n")
        k1_bow = lm.backoffs.get(1, {})
        if (BOS,) in k1_bow:
            fh.write(f"1 {BOS} -99 {k1_bow[(BOS,)] / ln10:.12g}\n")
        for k in range(1, lm.order + 1):
            bows = lm.backoffs.get(k, {})
            for gram in sorted(lm.probs[k], key=lambda g: [_sort_key(t) for t in g]):
                toks = " ".join(_tok_str(t) for t in gram)
                fh.write(f"{k} {toks} {lm.probs[k][gram] / ln10:.12g} "
                         f"{bows.get(gram, 0.0) / ln10:.12g}\n")


def load_lm(path) -> NgramLm:
    ln10 = math.log(10.0)
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "NGRAM":
            raise ValueError(f"{path}: missing NGRAM header")
        order, discount = int(header[1]), float(header[2])
        entries = [line.split() for line in fh if line.strip()]
    if order == 0:
        vocab = [_tok_parse(e[1]) for e in entries]
        return NgramLm.uniform(vocab)
    probs = {k: {} for k in range(1, order + 1)}
    backoffs = {k: {} for k in range(1, order + 1)}
    vocab = set()
    for e in entries:
        k = int(e[0])
        gram = tuple(_tok_parse(t) for t in e[1:1 + k])
        lp, bow = float(e[1 + k]), float(e[2 + k])
        if not (k == 1 and gram == (BOS,)):
            probs[k][gram] = lp * ln10
        if bow != 0.0:
            backoffs[k][gram] = bow * ln10
        if k == 1 and gram[0] not in _SPECIAL:
            vocab.add(gram[0])
    return NgramLm(order, discount, vocab, probs, backoffs)
