"""Acoustic model adaptation on (possibly automatic) supervision.

KLD-regularized adaptation trains against targets blended between the
forced-alignment one-hot vectors and the frozen baseline posteriors:

    P = (1 - alpha) * onehot + alpha * baseline_posteriors

With a per-sentence alpha derived from that sentence's WER the blend becomes
``alpha_k = beta + (1 - beta) * wer_k``.  The output-transform alternative
trains only an affine layer inserted between the last hidden layer and
the softmax layer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .acoustic import AcousticModel, TrainLog, TrainSchedule, forward, one_hot, train
from .decoder import DecodeError, forced_align
from .scoring import SelectionSpec, clamp_wer, select_ids

logger = logging.getLogger(__name__)

MODES = ("kld-hard", "kld-soft", "odlr")


@dataclass(frozen=True)
class AdaptationConfig:
    mode: str = "kld-hard"
    alpha: float = 0.3
    beta: float = 0.5
    wer_source: str = "oracle"
    selection: SelectionSpec | None = None
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(max_epochs=10))
    normalization: str = "raw"
    cv_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown adaptation mode {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.wer_source not in ("oracle", "predicted"):
            raise ValueError(f"unknown wer source {self.wer_source!r}")
        if self.normalization not in ("raw", "cmvn"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if not 0.0 < self.cv_fraction < 1.0:
            raise ValueError("cv_fraction must lie in (0, 1)")


@dataclass
class AdaptationSet:
    utterances: list
    supervision: dict  # utterance id -> word sequence
    alphas: dict | None = None  # utterance id -> alpha_k (soft mode only)

    def __post_init__(self):
        missing = [u.id for u in self.utterances if u.id not in self.supervision]
        if missing:
            raise ValueError(f"no supervision for {missing[0]}")
        if self.alphas is not None:
            for u in self.utterances:
                a = self.alphas.get(u.id)
                if a is None or not 0.0 <= a <= 1.0:
                    raise ValueError(f"alpha for {u.id} missing or outside [0, 1]")

    @property
    def n_frames(self) -> int:
        return sum(u.n_frames for u in self.utterances)

    @property
    def n_sentences(self) -> int:
        return len(self.utterances)


@dataclass
class AdaptResult:
    model: AcousticModel
    log: TrainLog
    dropped: list[str]
    updated_fraction: float = 1.0


def blend_targets(alpha: float, onehot: np.ndarray, posteriors: np.ndarray) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return (1.0 - alpha) * onehot + alpha * posteriors


def sentence_alpha(beta: float, wer: float) -> float:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return beta + (1.0 - beta) * clamp_wer(wer)


def build_adaptation_set(corpus, supervision: dict, config: AdaptationConfig,
                         wer_map: dict | None = None) -> AdaptationSet:
    """Apply the configured selection and, in soft mode, per-sentence alphas.

    ``wer_map`` holds the oracle or predicted sentence WERs (per
    ``config.wer_source``); it is required for selection and soft mode.
    """
    # utterances whose supervision has no words cannot be aligned
    utts = [u for u in corpus.utterances if supervision.get(u.id)]
    needs_wer = config.selection is not None or config.mode == "kld-soft"
    if needs_wer and wer_map is None:
        raise ValueError("selection and soft adaptation need sentence WERs")
    if config.selection is not None:
        keep, _ = select_ids([u.id for u in utts], wer_map, config.selection)
        keep = set(keep)
        utts = [u for u in utts if u.id in keep]
    alphas = None
    if config.mode == "kld-soft":
        alphas = {u.id: sentence_alpha(config.beta, wer_map[u.id]) for u in utts}
    return AdaptationSet(utts, {u.id: list(supervision[u.id]) for u in utts}, alphas)


def _split_cv(items, fraction: float, seed: int):
    """Deterministic held-out split by utterance; a single item serves as both."""
    if len(items) == 1:
        return items, items
    n_cv = min(len(items) - 1, max(1, int(round(fraction * len(items)))))
    order = np.random.default_rng([seed, 7]).permutation(len(items))
    cv_idx = set(order[:n_cv].tolist())
    train_items = [it for i, it in enumerate(items) if i not in cv_idx]
    cv_items = [it for i, it in enumerate(items) if i in cv_idx]
    return train_items, cv_items


def _alignments(baseline, priors, graph, aset: AdaptationSet):
    """One-hot targets from one forced alignment per utterance, plus dropped ids."""
    out, dropped = [], []
    for utt in aset.utterances:
        try:
            ali = forced_align(baseline, priors, utt, aset.supervision[utt.id], graph)
        except DecodeError as exc:
            logger.warning("dropping %s: %s", utt.id, exc)
            dropped.append(utt.id)
            continue
        out.append((utt, one_hot(ali.states, baseline.n_outputs)))
    if not out:
        raise ValueError("no utterance could be aligned")
    return out, dropped


def kld_targets(baseline, priors, graph, aset: AdaptationSet, alpha: float):
    """``(utterance id, frames, blended targets)`` per alignable utterance."""
    aligned, dropped = _alignments(baseline, priors, graph, aset)
    data = []
    for utt, onehot in aligned:
        a = aset.alphas[utt.id] if aset.alphas is not None else alpha
        # frozen-baseline posteriors, computed once
        post = forward(baseline, utt.frames)
        data.append((utt.id, utt.frames, blend_targets(a, onehot, post)))
    return data, dropped


def adapt_kld(baseline: AcousticModel, priors, graph, aset: AdaptationSet,
              config: AdaptationConfig) -> AdaptResult:
    if config.mode == "odlr":
        raise ValueError("use adapt_odlr for the output-transform mode")
    if config.mode == "kld-soft" and aset.alphas is None:
        raise ValueError("soft mode needs per-sentence alphas")
    data, dropped = kld_targets(baseline, priors, graph, aset, config.alpha)
    pairs = [(frames, targets) for _, frames, targets in data]
    tr, cv = _split_cv(pairs, config.cv_fraction, config.schedule.seed)
    model, log = train(baseline, tr, config.schedule, cv)
    return AdaptResult(model, log, dropped)


def retrain(baseline: AcousticModel, priors, graph, aset: AdaptationSet,
            schedule: TrainSchedule, cv_fraction: float = 0.1) -> AdaptResult:
    """Plain retraining on one-hot alignment targets, no regularization."""
    aligned, dropped = _alignments(baseline, priors, graph, aset)
    pairs = [(utt.frames, onehot) for utt, onehot in aligned]
    tr, cv = _split_cv(pairs, cv_fraction, schedule.seed)
    model, log = train(baseline, tr, schedule, cv)
    return AdaptResult(model, log, dropped)


def with_output_transform(model: AcousticModel) -> AcousticModel:
    """Copy of ``model`` with an identity affine transform before the softmax layer."""
    out = model.copy()
    k = model.sizes[-2]
    out.odlr = (np.eye(k), np.zeros(k))
    return out


def adapt_odlr(baseline: AcousticModel, priors, graph, aset: AdaptationSet,
               schedule: TrainSchedule, cv_fraction: float = 0.1) -> AdaptResult:
    """Train only an output affine transform against one-hot alignment targets."""
    if baseline.odlr is not None:
        raise ValueError("baseline already carries an output transform")
    aligned, dropped = _alignments(baseline, priors, graph, aset)
    pairs = [(utt.frames, onehot) for utt, onehot in aligned]
    tr, cv = _split_cv(pairs, cv_fraction, schedule.seed)
    start = with_output_transform(baseline)
    model, log = train(start, tr, schedule, cv, trainable="odlr")
    k = baseline.sizes[-2]
    fraction = (k * k + k) / start.n_params()
    logger.info("output transform updates %d of %d parameters (%.1f%%)",
                k * k + k, start.n_params(), 100.0 * fraction)
    return AdaptResult(model, log, dropped, fraction)


def adapt(baseline, priors, graph, aset: AdaptationSet, config: AdaptationConfig) -> AdaptResult:
    if config.mode == "odlr":
        return adapt_odlr(baseline, priors, graph, aset, config.schedule, config.cv_fraction)
    return adapt_kld(baseline, priors, graph, aset, config)


def format_log(result: AdaptResult) -> str:
    text = result.log.to_tsv()
    if result.dropped:
        text += "".join(f"# dropped\t{uid}\n" for uid in result.dropped)
    if not math.isclose(result.updated_fraction, 1.0):
        text += f"# updated-fraction\t{result.updated_fraction:.6f}\n"
    return text
