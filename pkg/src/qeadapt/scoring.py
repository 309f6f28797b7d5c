"""Edit-distance alignment, WER and utterance selection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_align(reference, hypothesis):
    """Minimal unit-cost alignment of two token sequences.

    Returns ``(ops, counts)`` where ``ops`` is a list of
    ``(op, ref_token, hyp_token)`` with ``None`` on the missing side.
    Backtrace prefers match, then substitution, deletion, insertion.
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = cost[i], cost[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (ri != hyp[j - 1])
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)

    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        c = cost[i][j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and c == cost[i - 1][j - 1]:
            ops.append((MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and c == cost[i - 1][j - 1] + 1:
            ops.append((SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and c == cost[i - 1][j] + 1:
            ops.append((DEL, ref[i - 1], None))
            i -= 1
        else:
            ops.append((INS, None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    counts = EditCounts(
        sum(op == SUB for op, _, _ in ops),
        sum(op == DEL for op, _, _ in ops),
        sum(op == INS for op, _, _ in ops),
        n,
    )
    return ops, counts


def edit_distance(a, b) -> int:
    return edit_align(a, b)[1].errors


def sentence_wer(reference, hypothesis, clamp: bool = False) -> float:
    """(S + D + I) / len(reference); ``clamp`` caps the value at 1."""
    reference = list(reference)
    if not reference:
        raise ValueError("reference must be non-empty")
    wer = edit_align(reference, hypothesis)[1].errors / len(reference)
    return min(wer, 1.0) if clamp else wer


def clamp_wer(wer: float) -> float:
    return min(max(wer, 0.0), 1.0)


@dataclass
class WerReport:
    """Per-utterance edit counts; corpus WER is a ratio of sums."""

    counts: dict[str, EditCounts]

    @classmethod
    def build(cls, references: dict, hypotheses: dict) -> "WerReport":
        out = {}
        for uid in sorted(references):
            ref = references[uid]
            if not ref:
                raise ValueError(f"{uid}: empty reference")
            out[uid] = edit_align(ref, hypotheses.get(uid, []))[1]
        return cls(out)

    def sentence_wers(self, clamp: bool = False) -> dict[str, float]:
        out = {}
        for uid, c in self.counts.items():
            w = c.errors / c.ref_len
            out[uid] = min(w, 1.0) if clamp else w
        return out

    @property
    def corpus_wer(self) -> float:
        return corpus_wer(self.counts.values())

    def to_tsv(self) -> str:
        lines = []
        for uid, c in self.counts.items():
            lines.append(f"{uid}\t{c.substitutions}\t{c.deletions}\t{c.insertions}\t"
                         f"{c.ref_len}\t{c.errors / c.ref_len:.6f}\n")
        lines.append(f"TOTAL {100.0 * self.corpus_wer:.2f}\n")
        return "".join(lines)


def corpus_wer(counts) -> float:
    counts = list(counts)
    words = sum(c.ref_len for c in counts)
    if words == 0:
        raise ValueError("corpus has no reference words")
    return sum(c.errors for c in counts) / words


def mean_abs_error(predictions, targets) -> float:
    predictions, targets = list(predictions), list(targets)
    if len(predictions) != len(targets):
        raise ValueError("length mismatch")
    if not predictions:
        raise ValueError("empty input")
    return sum(abs(p - t) for p, t in zip(predictions, targets)) / len(predictions)


@dataclass(frozen=True)
class SelectionSpec:
    basis: str = "oracle"
    mode: str = "threshold"
    threshold: float = 0.10
    k: int = 0

    def __post_init__(self):
        if self.basis not in ("oracle", "predicted"):
            raise ValueError(f"unknown selection basis {self.basis!r}")
        if self.mode == "threshold":
            if not 0.0 <= self.threshold <= 1.0:
                raise ValueError("threshold must lie in [0, 1]")
        elif self.mode == "topk":
            if self.k < 1:
                raise ValueError("K must be >= 1")
        else:
            raise ValueError(f"unknown selection mode {self.mode!r}")


def select_ids(ids, wer_map: dict, spec: SelectionSpec):
    """Ids kept by ``spec``, in their original order, plus a truncation flag."""
    ids = list(ids)
    missing = [u for u in ids if u not in wer_map]
    if missing:
        raise KeyError(f"wer_map misses {len(missing)} utterances, e.g. {missing[0]}")
    if spec.mode == "threshold":
        return [u for u in ids if wer_map[u] <= spec.threshold], False
    if spec.k >= len(ids):
        if spec.k > len(ids):
            warnings.warn(f"K={spec.k} exceeds corpus size {len(ids)}; keeping everything",
                          RuntimeWarning, stacklevel=2)
        return ids, spec.k > len(ids)
    ranked = sorted(ids, key=lambda u: (wer_map[u], u))
    keep = set(ranked[:spec.k])
    return [u for u in ids if u in keep], False


def select_utterances(corpus, wer_map: dict, spec: SelectionSpec):
    ids, _ = select_ids([u.id for u in corpus.utterances], wer_map, spec)
    return corpus.subset(ids)
