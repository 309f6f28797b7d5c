"""Token-HMM decoding: Viterbi, exact n-best, forced alignment, confusion networks.

The search graph has one left-to-right state chain per word, and (when
optional silence is on) one silence state per word, remembering that word as
LM history, plus a leading silence state.  Word-entry arcs carry
``lm_weight * log P(w | previous word)``; nothing else costs anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .acoustic import forward, scaled_loglik
from .corpus import SILENCE_ID
from .ngram import BOS, EOS
from .scoring import DEL, INS, MATCH, SUB, edit_align

NEG_INF = -np.inf
EPS = None  # epsilon entry in a confusion-network bin


class DecodeError(ValueError):
    pass


class DecodingGraph:

    def __init__(self, lexicon, lm, lm_weight: float = 1.0, optional_silence: bool = True,
                 words=None):
        self.lexicon = lexicon
        self.lm_weight = float(lm_weight)
        self.optional_silence = optional_silence
        self.words = list(lexicon.word_ids if words is None else words)
        if not self.words:
            raise ValueError("graph needs at least one word")
        V = len(self.words)
        self.word_index = {w: i for i, w in enumerate(self.words)}

        # LM tables over graph word indices
        self.lm_start = np.array([lm.cond_logprob(w, [BOS]) for w in self.words])
        self.lm_trans = np.array([[lm.cond_logprob(w, [u]) for w in self.words] for u in self.words])
        self.lm_end = np.array([lm.cond_logprob(EOS, [u]) for u in self.words])

        am, token, entry, exit_ = [], [], [], []
        for w in self.words:
            states = lexicon.states_of(w)
            entry.append(len(am))
            am.extend(states)
            token.extend([w] * len(states))
            exit_.append(len(am) - 1)
        self.n_word_states = len(am)
        self.entry = np.array(entry)
        self.exit = np.array(exit_)
        if optional_silence:
            sil_state = lexicon.states_of(SILENCE_ID)[0]
            self.sil_bos = len(am)
            am.append(sil_state)
            token.append(SILENCE_ID)
            self.sil = np.arange(len(am), len(am) + V)
            am.extend([sil_state] * V)
            token.extend([SILENCE_ID] * V)
        else:
            self.sil_bos = None
            self.sil = np.array([], dtype=int)
        self.am_state = np.array(am)
        self.token = np.array(token)
        G = len(am)
        self.n_states = G
        self.min_frames = min(len(lexicon.states_of(w)) for w in self.words)

        lw = self.lm_weight
        tr = np.full((G, G), NEG_INF)
        # cont_pred: the single non-entry predecessor of a state, -1 if none
        cont = np.full(G, -1)
        is_entry = np.zeros(G, dtype=bool)
        is_entry[self.entry] = True
        for g in range(self.n_word_states):
            tr[g, g] = 0.0
            if not is_entry[g]:
                tr[g - 1, g] = 0.0
                cont[g] = g - 1
        for wi, g in enumerate(self.entry):
            for ui in range(V):
                tr[self.exit[ui], g] = max(tr[self.exit[ui], g], lw * self.lm_trans[ui, wi])
                if optional_silence:
                    tr[self.sil[ui], g] = lw * self.lm_trans[ui, wi]
            if optional_silence:
                tr[self.sil_bos, g] = lw * self.lm_start[wi]
        if optional_silence:
            tr[self.sil_bos, self.sil_bos] = 0.0
            for ui in range(V):
                s = self.sil[ui]
                tr[s, s] = 0.0
                tr[self.exit[ui], s] = 0.0
                cont[s] = self.exit[ui]
        self.transitions = tr
        self.cont_pred = cont

        start = np.full(G, NEG_INF)
        start[self.entry] = lw * self.lm_start
        final = np.full(G, NEG_INF)
        final[self.exit] = lw * self.lm_end
        if optional_silence:
            start[self.sil_bos] = 0.0
            final[self.sil] = lw * self.lm_end
        self.start = start
        self.final = final
        # rows: previous word (merged exit/silence), then sentence start
        self.entry_lm = lw * np.vstack([self.lm_trans, self.lm_start[None]]) if optional_silence \
            else lw * self.lm_trans

    def lm_score(self, words) -> float:
        """lm_weight * bigram log-probability of a word sequence."""
        if not words:
            raise ValueError("empty word sequence")
        idx = [self.word_index[w] for w in words]
        total = self.lm_start[idx[0]] + self.lm_end[idx[-1]]
        for a, b in zip(idx[:-1], idx[1:]):
            total += self.lm_trans[a, b]
        return self.lm_weight * float(total)


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    am_score: float = 0.0
    lm_score: float = 0.0

    @property
    def words(self) -> list[int]:
        return [t for t in self.tokens if t != SILENCE_ID]


@dataclass
class Alignment:
    states: np.ndarray
    spans: list[tuple[int, int, int]]  # (token, start, end)
    score: float = 0.0

    @property
    def tokens(self) -> list[int]:
        return [t for t, _, _ in self.spans]


@dataclass
class NBestList:
    hypotheses: list[Hypothesis]
    truncated: bool = False

    def __len__(self):
        return len(self.hypotheses)

    def __getitem__(self, i):
        return self.hypotheses[i]

    def __iter__(self):
        return iter(self.hypotheses)


def emission_scores(model, priors, frames) -> np.ndarray:
    return scaled_loglik(forward(model, frames), priors)


def _as_scores(model, priors, utterance):
    if model is None:
        # caller passed a precomputed T x I emission matrix
        return np.asarray(utterance)
    frames = utterance.frames if hasattr(utterance, "frames") else utterance
    return emission_scores(model, priors, frames)


def viterbi_scores(graph: DecodingGraph, emissions: np.ndarray):
    """Best path through the graph; ties go to the lowest predecessor index."""
    T = emissions.shape[0]
    if T < graph.min_frames:
        raise DecodeError(f"{T} frames is shorter than the minimum path length {graph.min_frames}")
    em = emissions[:, graph.am_state]
    G = graph.n_states
    bp = np.empty((T, G), dtype=np.int64)
    delta = graph.start + em[0]
    bp[0] = -1
    tr = graph.transitions
    for t in range(1, T):
        cand = delta[:, None] + tr
        best = np.argmax(cand, axis=0)
        delta = cand[best, np.arange(G)] + em[t]
        bp[t] = best
    fin = delta + graph.final
    last = int(np.argmax(fin))
    score = float(fin[last])
    if not np.isfinite(score):
        raise DecodeError("no complete path")
    path = np.empty(T, dtype=np.int64)
    path[-1] = last
    for t in range(T - 1, 0, -1):
        path[t - 1] = bp[t, path[t]]
    return path, score


def _segments(graph: DecodingGraph, path):
    """Split a graph-state path into (token, start, end) spans."""
    spans = []
    is_entry = np.zeros(graph.n_states, dtype=bool)
    is_entry[graph.entry] = True
    for t, g in enumerate(path):
        g = int(g)
        if t == 0:
            new = True
        else:
            p = int(path[t - 1])
            if p == g:
                new = False
            elif is_entry[g] or g == graph.sil_bos:
                new = True
            elif g in graph.sil:
                new = True
            else:
                new = False
        if new:
            spans.append([int(graph.token[g]), t, t + 1])
        else:
            spans[-1][2] = t + 1
    return [tuple(s) for s in spans]


def viterbi(model, priors, utterance, graph: DecodingGraph, lm_weight=None):
    """1-best hypothesis and its state alignment.

    ``lm_weight`` is taken from the graph; passing a different value here
    is an error so that graph and call never disagree silently.
    """
    if lm_weight is not None and float(lm_weight) != graph.lm_weight:
        raise ValueError("lm_weight differs from the graph's lm_weight")
    em = _as_scores(model, priors, utterance)
    path, score = viterbi_scores(graph, em)
    spans = _segments(graph, path)
    tokens = [s[0] for s in spans]
    words = [t for t in tokens if t != SILENCE_ID]
    lm = graph.lm_score(words)
    hyp = Hypothesis(tokens, score, score - lm, lm)
    return hyp, Alignment(graph.am_state[path], spans, score - lm)


# --- n-best -------------------------------------------------------------------

class _Trie:
    """Interned word histories: id 0 is the empty history."""

    def __init__(self):
        self.parent = [-1]
        self.word = [-1]
        self.index = {}

    def child(self, parent: int, word: int) -> int:
        key = (parent, word)
        hid = self.index.get(key)
        if hid is None:
            hid = len(self.parent)
            self.parent.append(parent)
            self.word.append(word)
            self.index[key] = hid
        return hid

    def sequence(self, hid: int) -> list[int]:
        out = []
        while hid > 0:
            out.append(self.word[hid])
            hid = self.parent[hid]
        return out[::-1]


def _dedup_topn(scores, ids, n):
    """Per row: drop worse duplicates of an id, keep the n best (stable)."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    s_sorted = np.take_along_axis(scores, order, -1)
    i_sorted = np.take_along_axis(ids, order, -1)
    M = s_sorted.shape[1]
    earlier = np.tri(M, M, -1, dtype=bool).T  # earlier[i, j]: i < j
    same = i_sorted[:, :, None] == i_sorted[:, None, :]
    dup = (same & earlier).any(axis=1) | (i_sorted < 0)
    s_sorted = np.where(dup, NEG_INF, s_sorted)
    keep = np.argsort(dup, axis=-1, kind="stable")[:, :n]
    out_s = np.take_along_axis(s_sorted, keep, -1)
    out_i = np.where(np.isfinite(out_s), np.take_along_axis(i_sorted, keep, -1), -1)
    return out_s, out_i


def _topn(scores, ids, n):
    top = np.argsort(-scores, axis=-1, kind="stable")[:, :n]
    out_s = np.take_along_axis(scores, top, -1)
    out_i = np.where(np.isfinite(out_s), np.take_along_axis(ids, top, -1), -1)
    return out_s, out_i


def nbest_sequences(graph: DecodingGraph, emissions: np.ndarray, n: int, beam: float = np.inf):
    """Exact top-n distinct word sequences (best path score per sequence).

    Each state keeps its n best partial paths with distinct word histories;
    that is sufficient because any sequence in the global top n has its
    prefix among the top n histories of every state on its best path.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    T = emissions.shape[0]
    if T < graph.min_frames:
        raise DecodeError(f"{T} frames is shorter than the minimum path length {graph.min_frames}")
    em = emissions[:, graph.am_state]
    G, V = graph.n_states, len(graph.words)
    trie = _Trie()
    word_of_entry = np.array(graph.words)

    S = np.full((G, n), NEG_INF)
    H = np.full((G, n), -1, dtype=np.int64)
    for wi, g in enumerate(graph.entry):
        S[g, 0] = graph.start[g]
        H[g, 0] = trie.child(0, int(word_of_entry[wi]))
    if graph.sil_bos is not None:
        S[graph.sil_bos, 0] = 0.0
        H[graph.sil_bos, 0] = 0
    S = S + em[0][:, None]

    cont = graph.cont_pred
    has_cont = cont >= 0
    entry_rows = graph.entry
    for t in range(1, T):
        # continuation: self-loop plus the single chain/silence predecessor
        cs = np.concatenate([S, np.where(has_cont[:, None], S[cont], NEG_INF)], axis=1)
        ci = np.concatenate([H, np.where(has_cont[:, None], H[cont], -1)], axis=1)
        # word entries: merge each word's exit and silence lists (they share
        # histories), then every merged list extends to every word
        ms = np.concatenate([S[graph.exit], S[graph.sil]], axis=1) if len(graph.sil) else S[graph.exit]
        mi = np.concatenate([H[graph.exit], H[graph.sil]], axis=1) if len(graph.sil) else H[graph.exit]
        ms, mi = _dedup_topn(ms, mi, n)
        if graph.sil_bos is not None:
            ms = np.vstack([ms, S[graph.sil_bos][None]])
            mi = np.vstack([mi, H[graph.sil_bos][None]])
        ps = (ms[:, :, None] + graph.entry_lm[:, None, :]).transpose(2, 0, 1).reshape(V, -1)
        src = np.broadcast_to(mi.reshape(1, -1), ps.shape)
        es, esrc = _topn(ps, src, n)
        eid = np.full_like(esrc, -1)
        for wi in range(V):
            w = int(word_of_entry[wi])
            for k in range(n):
                if esrc[wi, k] >= 0:
                    eid[wi, k] = trie.child(int(esrc[wi, k]), w)
        all_s = np.concatenate([cs, np.full((G, n), NEG_INF)], axis=1)
        all_i = np.concatenate([ci, np.full((G, n), -1, dtype=np.int64)], axis=1)
        all_s[entry_rows, 2 * n:] = es
        all_i[entry_rows, 2 * n:] = eid
        S, H = _dedup_topn(all_s, all_i, n)
        S = S + em[t][:, None]
        if np.isfinite(beam):
            best = S.max()
            S = np.where(S < best - beam, NEG_INF, S)
            H = np.where(np.isfinite(S), H, -1)

    fin_states = np.flatnonzero(np.isfinite(graph.final))
    fs = (S[fin_states] + graph.final[fin_states][:, None]).reshape(1, -1)
    fi = H[fin_states].reshape(1, -1)
    fs, fi = _dedup_topn(fs, np.ascontiguousarray(fi), n)
    out = []
    for s, h in zip(fs[0], fi[0]):
        if np.isfinite(s) and h > 0:
            out.append((trie.sequence(int(h)), float(s)))
    return out


def nbest(model, priors, utterance, graph: DecodingGraph, lm_weight=None, n: int = 5,
          beam: float = np.inf) -> NBestList:
    """Viterbi hypothesis followed by the next best distinct word sequences."""
    if lm_weight is not None and float(lm_weight) != graph.lm_weight:
        raise ValueError("lm_weight differs from the graph's lm_weight")
    em = _as_scores(model, priors, utterance)
    first, _ = viterbi(None, None, em, graph)
    hyps = [first]
    if n > 1:
        for words, score in nbest_sequences(graph, em, n, beam):
            if len(hyps) == n:
                break
            if words == first.words:
                continue
            ali = forced_align(None, None, em, words, graph)
            lm = graph.lm_score(words)
            hyps.append(Hypothesis(ali.tokens, score, score - lm, lm))
    return NBestList(hyps, truncated=len(hyps) < n)


# --- forced alignment -----------------------------------------------------------

def _forced_chain(lexicon, tokens, optional_silence):
    """Linear state chain; returns (am states, token per position, optional flags)."""
    sil = lexicon.states_of(SILENCE_ID)[0]
    states, owner, optional = [], [], []

    def add_opt():
        states.append(sil)
        owner.append((SILENCE_ID, -1))
        optional.append(True)

    for i, tok in enumerate(tokens):
        prev_sil = i > 0 and tokens[i - 1] == SILENCE_ID
        if optional_silence and tok != SILENCE_ID and (i == 0 or not prev_sil):
            add_opt()
        for s in lexicon.states_of(tok):
            states.append(s)
            owner.append((tok, i))
            optional.append(False)
    if optional_silence and tokens and tokens[-1] != SILENCE_ID:
        add_opt()
    return np.array(states), owner, np.array(optional)


def forced_align(model, priors, utterance, reference, graph: DecodingGraph) -> Alignment:
    """Best state path constrained to ``reference`` (silence optional between words)."""
    reference = list(reference)
    if not reference:
        raise ValueError("reference must be non-empty")
    em = _as_scores(model, priors, utterance)
    T = em.shape[0]
    states, owner, optional = _forced_chain(graph.lexicon, reference, graph.optional_silence)
    L = len(states)
    mandatory = int((~optional).sum())
    if T < mandatory:
        raise DecodeError(f"{T} frames cannot cover {mandatory} mandatory states")
    e = em[:, states]
    # a state can be entered from i-1, or from i-2 when i-1 is optional
    skip_ok = np.zeros(L, dtype=bool)
    skip_ok[2:] = optional[1:-1]
    delta = np.full(L, NEG_INF)
    delta[0] = e[0, 0]
    if L > 1 and optional[0]:
        delta[1] = e[0, 1]
    bp = np.zeros((T, L), dtype=np.int64)
    idx = np.arange(L)
    for t in range(1, T):
        stay = delta
        step = np.concatenate([[NEG_INF], delta[:-1]])
        skip = np.full(L, NEG_INF)
        skip[2:] = np.where(skip_ok[2:], delta[:-2], NEG_INF)
        cand = np.stack([skip, step, stay])
        choice = np.argmax(cand, axis=0)
        delta = cand[choice, idx] + e[t]
        bp[t] = idx - 2 + choice
    finals = [L - 1] + ([L - 2] if L > 1 and optional[-1] else [])
    last = max(finals, key=lambda i: (delta[i], -i))
    score = float(delta[last])
    if not np.isfinite(score):
        raise DecodeError("no path through the forced-alignment chain")
    path = np.empty(T, dtype=np.int64)
    path[-1] = last
    for t in range(T - 1, 0, -1):
        path[t - 1] = bp[t, path[t]]

    spans = []
    prev_key = None
    for t, pos in enumerate(path):
        tok, ref_pos = owner[pos]
        key = (tok, ref_pos, pos) if ref_pos < 0 else (tok, ref_pos)
        if key != prev_key:
            spans.append([tok, t, t + 1])
            prev_key = key
        else:
            spans[-1][2] = t + 1
    return Alignment(states[path], [tuple(s) for s in spans], score)


# --- confusion networks -----------------------------------------------------------

@dataclass
class ConfusionNetwork:
    bins: list[list[tuple[int | None, float]]] = field(default_factory=list)

    def __len__(self):
        return len(self.bins)

    def consensus(self) -> list[int]:
        out = []
        for b in self.bins:
            tok = b[0][0]
            if tok is not EPS:
                out.append(tok)
        return out


def _entry_key(item):
    tok, p = item
    return (-p, 1 if tok is EPS else 0, -1 if tok is EPS else tok)


def build_cn(nbest_list, temperature: float = 1.0) -> ConfusionNetwork:
    """Pivot confusion network: every hypothesis aligned to the 1-best."""
    hyps = list(nbest_list)
    if not hyps:
        raise ValueError("empty n-best list")
    scores = np.array([h.score for h in hyps]) / temperature
    w = np.exp(scores - scores.max())
    w /= w.sum()
    pivot = hyps[0].tokens
    L = len(pivot)
    pivot_bins = [dict() for _ in range(L)]
    # insertion slots: gap index -> list of dicts
    ins_slots: dict[int, list[dict]] = {}
    for h, wh in zip(hyps, w):
        ops, _ = edit_align(pivot, h.tokens)
        pos = 0
        pending = []
        for op, ref_tok, hyp_tok in ops:
            if op == INS:
                pending.append(hyp_tok)
                continue
            if pending:
                _add_insertions(ins_slots, pos, pending, wh)
                pending = []
            if op in (MATCH, SUB):
                pivot_bins[pos][hyp_tok] = pivot_bins[pos].get(hyp_tok, 0.0) + wh
            elif op == DEL:
                pivot_bins[pos][EPS] = pivot_bins[pos].get(EPS, 0.0) + wh
            pos += 1
        if pending:
            _add_insertions(ins_slots, pos, pending, wh)

    cn = ConfusionNetwork()
    for gap in range(L + 1):
        for slot in ins_slots.get(gap, []):
            cn.bins.append(_finish_bin(slot))
        if gap < L:
            cn.bins.append(_finish_bin(pivot_bins[gap]))
    return cn


def _add_insertions(ins_slots, gap, tokens, weight):
    slots = ins_slots.setdefault(gap, [])
    for j, tok in enumerate(tokens):
        if j == len(slots):
            slots.append({})
        slots[j][tok] = slots[j].get(tok, 0.0) + weight


def _finish_bin(acc: dict):
    total = sum(acc.values())
    if total < 1.0:
        acc[EPS] = acc.get(EPS, 0.0) + (1.0 - total)
    total = sum(acc.values())
    items = [(tok, p / total) for tok, p in acc.items()]
    items.sort(key=_entry_key)
    return items


# --- dumps ------------------------------------------------------------------------

def format_nbest(utt_id: str, nbest_list, lexicon) -> str:
    lines = []
    for rank, h in enumerate(nbest_list, 1):
        toks = " ".join(lexicon.surfaces(h.tokens))
        lines.append(f"{utt_id} {rank} {h.score:.6f} {toks}\n")
    return "".join(lines)


def format_cn(utt_id: str, cn: ConfusionNetwork, lexicon) -> str:
    lines = []
    for i, b in enumerate(cn.bins):
        for tok, p in b:
            name = "«eps»" if tok is EPS else lexicon[tok].surface
            lines.append(f"{utt_id} {i} {name} {p:.9f}\n")
    return "".join(lines)


def parse_nbest(text: str, lexicon, graph: DecodingGraph | None = None) -> dict[str, NBestList]:
    """Read an n-best dump; with ``graph`` the LM/acoustic split is restored."""
    lookup = lexicon.surface_map()
    out: dict[str, list] = {}
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        uid, score = parts[0], float(parts[2])
        tokens = [lookup[s] for s in parts[3:]]
        hyp = Hypothesis(tokens, score)
        if graph is not None and hyp.words:
            hyp.lm_score = graph.lm_score(hyp.words)
            hyp.am_score = score - hyp.lm_score
        out.setdefault(uid, []).append(hyp)
    return {uid: NBestList(h) for uid, h in out.items()}
