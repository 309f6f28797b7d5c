"""Experiment orchestration: two-pass decoding with adaptation, grids, rescoring."""

from __future__ import annotations

import dataclasses
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .acoustic import (TrainSchedule, estimate_priors, init_model, one_hot, save_model,
                       save_priors, train)
from .adaptation import AdaptationConfig, adapt, build_adaptation_set, format_log
from .corpus import (BigramGenerator, Corpus, CorpusSpec, SyntheticCorpora, cmvn_per_speaker,
                     gen_corpus, generator_alignment, read_corpus, read_lexicon)
from .decoder import DecodeError, DecodingGraph, build_cn, format_cn, format_nbest, nbest, viterbi
from .ngram import logprob, train_lm
from .qe.features import extract_features, format_features, train_class_lm
from .qe.xrt import (XrtParams, cross_val_predict, load_xrt, speaker_folds, tune_cv, xrt_fit,
                     xrt_predict)
from .scoring import SelectionSpec, WerReport, select_ids

logger = logging.getLogger(__name__)

GRID_SIZES = (50, 100, 150, 300, 600, 1200)
GRID_ALPHAS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


@dataclass
class ExperimentConfig:
    seed: int = 0
    # corpus: generated from these values unless corpus_dir is set
    corpus_dir: str = ""
    vocab_size: int = 20
    n_train: int = 400
    n_dev: int = 160
    n_test: int = 1320
    min_words: int = 5
    max_words: int = 12
    mismatch: float = 0.6
    emission_stddev: float = 0.6
    normalization: str = "raw"
    # acoustic model and decoder
    hidden: str = "64"
    context: int = 2
    lm_weight: float = 1.0
    lm_extra_sentences: int = 2000
    # first pass and quality estimation
    nbest: int = 5
    cn_temperature: float = 1.0
    qe_folds: int = 4
    qe_model: str = ""
    # adaptation
    condition: str = "homogeneous"
    eval_set: str = "test"
    supervision: str = "auto"
    mode: str = "kld-hard"
    alpha: float = 0.3
    beta: float = 0.5
    selection: str = "none"
    wer_source: str = "oracle"
    threshold: float = 0.10
    topk: int = 0
    tune_thresholds: str = ""
    adapt_epochs: int = 10
    learning_rate: float = 0.008
    odlr_learning_rate: float = 0.0005
    # grid and rescoring
    grid_sizes: str = ",".join(str(s) for s in GRID_SIZES)
    grid_alphas: str = ",".join(str(a) for a in GRID_ALPHAS)
    rescore_lm: str = ""
    rescore_weight: float = 0.5
    output_dir: str = ""

    def __post_init__(self):
        if self.normalization not in ("raw", "cmvn"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.condition not in ("homogeneous", "cross"):
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.eval_set not in ("dev", "test"):
            raise ValueError(f"unknown evaluation set {self.eval_set!r}")
        if self.condition == "cross" and self.eval_set != "test":
            raise ValueError("cross conditions adapt on dev and evaluate on test")
        if self.supervision not in ("auto", "manual"):
            raise ValueError(f"unknown supervision {self.supervision!r}")
        if self.selection not in ("none", "oracle", "predicted"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.wer_source not in ("oracle", "predicted"):
            raise ValueError(f"unknown wer source {self.wer_source!r}")
        if self.selection != "none" and self.selection != self.wer_source:
            # a selection basis also fixes where sentence WERs come from
            self.wer_source = self.selection
        if self.supervision == "manual" and self.condition == "homogeneous":
            raise ValueError("manual supervision of the evaluation set is not available")
        if not _ints(self.grid_sizes) or not _floats(self.grid_alphas):
            raise ValueError("grids must be non-empty")

    @property
    def layout(self) -> list[int]:
        return _ints(self.hidden)

    @property
    def sizes(self) -> list[int]:
        return _ints(self.grid_sizes)

    @property
    def alphas(self) -> list[float]:
        return _floats(self.grid_alphas)

    @property
    def thresholds(self) -> list[float]:
        return _floats(self.tune_thresholds)

    def schedule(self, seed: int | None = None, odlr: bool = False) -> TrainSchedule:
        lr = self.odlr_learning_rate if odlr else self.learning_rate
        return TrainSchedule(learning_rate=lr, max_epochs=self.adapt_epochs,
                             seed=self.seed if seed is None else seed)

    def adaptation(self, alpha=None, seed=None, selection=None) -> AdaptationConfig:
        return AdaptationConfig(
            mode=self.mode,
            alpha=self.alpha if alpha is None else alpha,
            beta=self.beta,
            wer_source=self.wer_source,
            selection=selection,
            schedule=self.schedule(seed, odlr=self.mode == "odlr"),
            normalization=self.normalization,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, value: str):
    ftype = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}[name]
    if ftype in ("int", int):
        return int(value)
    if ftype in ("float", float):
        return float(value)
    return value


def read_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """``key = value`` lines with ``#`` comments; ``overrides`` win."""
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    if path:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in known:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return ExperimentConfig(**values)


def write_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        for f in dataclasses.fields(config):
            fh.write(f"{f.name} = {getattr(config, f.name)}\n")


# named experiment layouts: adaptation set, supervision, normalization, evaluation set
PRESETS = {
    "DT05+man+cmvn+ET05": dict(condition="cross", supervision="manual", normalization="cmvn"),
    "DT05+man+raw+ET05": dict(condition="cross", supervision="manual", normalization="raw"),
    "DT05+auto+cmvn+ET05": dict(condition="cross", supervision="auto", normalization="cmvn"),
    "DT05+auto+raw+ET05": dict(condition="cross", supervision="auto", normalization="raw"),
    "DT05+auto+cmvn+DT05": dict(condition="homogeneous", supervision="auto", normalization="cmvn",
                                eval_set="dev"),
    "DT05+auto+raw+DT05": dict(condition="homogeneous", supervision="auto", normalization="raw",
                               eval_set="dev"),
    "ET05+auto+cmvn+ET05": dict(condition="homogeneous", supervision="auto", normalization="cmvn"),
    "ET05+auto+raw+ET05": dict(condition="homogeneous", supervision="auto", normalization="raw"),
}


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --- world: corpora, language models, baseline -----------------------------------

@dataclass
class World:
    corpora: SyntheticCorpora
    graph: DecodingGraph
    lm_in: object
    lm_out: object
    class_lm: object
    baseline: object
    priors: object

    @property
    def lexicon(self):
        return self.corpora.lexicon


_WORLD_KEYS = ("seed", "corpus_dir", "vocab_size", "n_train", "n_dev", "n_test", "min_words",
               "max_words", "mismatch",
               "emission_stddev", "normalization", "hidden", "context", "lm_weight",
               "lm_extra_sentences")
_WORLD_CACHE: dict = {}


def _corpora(config: ExperimentConfig) -> SyntheticCorpora:
    if config.corpus_dir:
        lexicon = read_lexicon(os.path.join(config.corpus_dir, "lexicon.tsv"))
        splits = {s: read_corpus(os.path.join(config.corpus_dir, s), lexicon, s, s)
                  for s in ("train", "dev", "test")}
        generator = BigramGenerator.random(lexicon.word_ids, config.seed + 1)
        return SyntheticCorpora(lexicon, generator, splits["train"], splits["dev"],
                                splits["test"], {}, {}, 3)
    spec = CorpusSpec(seed=config.seed, vocab_size=config.vocab_size,
                      n_utts={"train": config.n_train, "dev": config.n_dev, "test": config.n_test},
                      length_range=(config.min_words, config.max_words),
                      mismatch=config.mismatch, emission_stddev=config.emission_stddev)
    return gen_corpus(spec)


def build_world(config: ExperimentConfig) -> World:
    """Corpora, decoder graph, text models and the baseline; cached per process."""
    key = tuple(getattr(config, k) for k in _WORLD_KEYS)
    if key in _WORLD_CACHE:
        return _WORLD_CACHE[key]
    corpora = _corpora(config)
    if config.normalization == "cmvn":
        corpora = dataclasses.replace(corpora, train=cmvn_per_speaker(corpora.train),
                                      dev=cmvn_per_speaker(corpora.dev),
                                      test=cmvn_per_speaker(corpora.test))
    lex = corpora.lexicon
    train_text = [u.words for u in corpora.train]
    # the decoder LM sees training transcripts only; the richer in-domain
    # model adds generator text, the out-of-domain one a different generator
    dec_lm = train_lm(train_text, order=2)
    extra = corpora.sample_text(config.lm_extra_sentences, derive_seed(config.seed, 11))
    lm_in = train_lm(train_text + extra, order=3)
    other = BigramGenerator.random(lex.word_ids, derive_seed(config.seed, 12))
    rng = np.random.default_rng(derive_seed(config.seed, 13))
    lo, hi = corpora.length_range
    lm_out = train_lm([other.sample(rng, lo, hi) for _ in range(config.lm_extra_sentences)], order=3)
    class_lm = train_class_lm(train_text + extra, lex, order=2)
    graph = DecodingGraph(lex, dec_lm, config.lm_weight)

    fps = corpora.frames_per_state
    aligns = [generator_alignment(lex, u.reference, fps) for u in corpora.train]
    data = [(u.frames, one_hot(a, lex.n_states)) for u, a in zip(corpora.train, aligns)]
    n_cv = max(1, len(data) // 10)
    order = np.random.default_rng(derive_seed(config.seed, 14)).permutation(len(data))
    cv_idx = set(order[:n_cv].tolist())
    tr = [d for i, d in enumerate(data) if i not in cv_idx]
    cv = [d for i, d in enumerate(data) if i in cv_idx]
    model = init_model(derive_seed(config.seed, 15), [lex.dim * (2 * config.context + 1)]
                       + config.layout + [lex.n_states], config.context)
    baseline, _ = train(model, tr, TrainSchedule(seed=derive_seed(config.seed, 16)), cv)
    priors = estimate_priors(aligns, lex.n_states)
    world = World(corpora, graph, lm_in, lm_out, class_lm, baseline, priors)
    _WORLD_CACHE[key] = world
    return world


# --- first pass ---------------------------------------------------------------------

@dataclass
class FirstPass:
    hyps: dict = field(default_factory=dict)      # uid -> Hypothesis
    nbests: dict = field(default_factory=dict)    # uid -> NBestList
    cns: dict = field(default_factory=dict)       # uid -> ConfusionNetwork
    features: dict = field(default_factory=dict)  # uid -> 41-vector
    failed: list = field(default_factory=list)

    def words(self) -> dict:
        return {uid: h.words for uid, h in self.hyps.items()}


def decode_corpus(model, priors, corpus: Corpus, graph) -> FirstPass:
    out = FirstPass()
    for utt in corpus:
        try:
            out.hyps[utt.id] = viterbi(model, priors, utt, graph)[0]
        except DecodeError as exc:
            logger.warning("decode failed for %s: %s", utt.id, exc)
            out.failed.append(utt.id)
    return out


def first_pass(corpus: Corpus, world: World, model=None, with_qe: bool = True, n: int = 5,
               temperature: float = 1.0, out_dir=None) -> FirstPass:
    """1-best, n-best, confusion network and QE features per utterance."""
    model = world.baseline if model is None else model
    if not with_qe:
        fp = decode_corpus(model, world.priors, corpus, world.graph)
    else:
        fp = FirstPass()
        for utt in corpus:
            try:
                nb = nbest(model, world.priors, utt, world.graph, n=n)
            except DecodeError as exc:
                logger.warning("decode failed for %s: %s", utt.id, exc)
                fp.failed.append(utt.id)
                continue
            cn = build_cn(nb, temperature)
            fp.hyps[utt.id], fp.nbests[utt.id], fp.cns[utt.id] = nb[0], nb, cn
            fp.features[utt.id] = extract_features(utt, nb[0], cn, world.lm_in, world.lm_out,
                                                   world.class_lm, world.lexicon)
    if out_dir:
        dump_first_pass(fp, world.lexicon, out_dir)
    return fp


def dump_first_pass(fp: FirstPass, lexicon, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "hyp.txt"), "w") as fh:
        for uid, h in fp.hyps.items():
            fh.write(f"{uid} {' '.join(lexicon.surfaces(h.words))}\n".replace("  ", " "))
    if fp.nbests:
        with open(os.path.join(out_dir, "nbest.txt"), "w") as fh:
            for uid, nb in fp.nbests.items():
                fh.write(format_nbest(uid, nb, lexicon))
        with open(os.path.join(out_dir, "cn.txt"), "w") as fh:
            for uid, cn in fp.cns.items():
                fh.write(format_cn(uid, cn, lexicon))
        with open(os.path.join(out_dir, "features.tsv"), "w") as fh:
            fh.write(format_features(fp.features.items()))
    if fp.failed:
        with open(os.path.join(out_dir, "failed.txt"), "w") as fh:
            fh.write("".join(f"{uid}\n" for uid in fp.failed))


def wer_report(corpus: Corpus, hyps: dict) -> WerReport:
    return WerReport.build({u.id: u.words for u in corpus}, hyps)


def oracle_wers(corpus: Corpus, fp: FirstPass) -> dict:
    rep = wer_report(corpus.subset(list(fp.hyps)), fp.words())
    return rep.sentence_wers(clamp=True)


# --- quality estimation ----------------------------------------------------------------

def default_qe_grid(seed: int) -> list[XrtParams]:
    return [XrtParams(n_bags=2, trees_per_bag=10, k_features=k, n_min=m, seed=seed)
            for k in (8, 20) for m in (5, 20)]


@dataclass
class QeFit:
    params: XrtParams
    model: object
    dev_oof: dict  # uid -> out-of-fold prediction on the training corpus


def train_qe(corpus: Corpus, fp: FirstPass, k: int, seed: int, grid=None) -> QeFit:
    """Tune on speaker-disjoint folds, refit on everything, keep fold predictions."""
    ids = sorted(fp.features)
    by_id = corpus.by_id()
    X = np.array([fp.features[u] for u in ids])
    wers = oracle_wers(corpus, fp)
    y = np.array([wers[u] for u in ids])
    groups = [by_id[u].speaker for u in ids]
    k = min(k, len(set(groups)))
    grid = default_qe_grid(seed) if grid is None else grid
    params, _ = tune_cv(X, y, grid, k, seed, groups)
    oof = cross_val_predict(X, y, params, speaker_folds(groups, k, seed))
    return QeFit(params, xrt_fit(X, y, params), dict(zip(ids, oof.tolist())))


def predict_wers(qe_model, fp: FirstPass) -> dict:
    ids = sorted(fp.features)
    if not ids:
        return {}
    pred = xrt_predict(qe_model, np.array([fp.features[u] for u in ids]))
    return dict(zip(ids, pred.tolist()))


# --- adaptation + second pass -------------------------------------------------------------

@dataclass
class AdaptOutcome:
    wer: float
    n_adapt: int
    model: object
    log: str = ""


def adapt_and_decode(world: World, adapt_corpus: Corpus, supervision: dict, eval_corpus: Corpus,
                     acfg: AdaptationConfig, wer_map=None) -> AdaptOutcome:
    aset = build_adaptation_set(adapt_corpus, supervision, acfg, wer_map)
    if not aset.utterances:
        warnings.warn("empty adaptation selection; keeping the baseline", RuntimeWarning,
                      stacklevel=2)
        model, log = world.baseline, ""
    else:
        result = adapt(world.baseline, world.priors, world.graph, aset, acfg)
        model, log = result.model, format_log(result)
    fp = decode_corpus(model, world.priors, eval_corpus, world.graph)
    return AdaptOutcome(wer_report(eval_corpus, fp.words()).corpus_wer, len(aset.utterances),
                        model, log)


@dataclass
class TwoPassResult:
    baseline_wer: float
    adapted_wer: float
    n_adapt_candidates: int
    n_selected: int
    threshold: float | None
    alpha: float
    qe_mae: float | None = None

    def to_tsv(self) -> str:
        rows = [
            ("baseline_wer", f"{100 * self.baseline_wer:.2f}"),
            ("adapted_wer", f"{100 * self.adapted_wer:.2f}"),
            ("adaptation_candidates", str(self.n_adapt_candidates)),
            ("selected", str(self.n_selected)),
            ("threshold", "-" if self.threshold is None else f"{self.threshold:.2f}"),
            ("alpha", f"{self.alpha:.2f}"),
            ("qe_mae", "-" if self.qe_mae is None else f"{self.qe_mae:.4f}"),
        ]
        return "".join(f"{k}\t{v}\n" for k, v in rows)


def _selection(config: ExperimentConfig, threshold=None):
    if config.selection == "none":
        return None
    if config.topk > 0:
        return SelectionSpec(basis=config.selection, mode="topk", k=config.topk)
    return SelectionSpec(basis=config.selection, mode="threshold",
                         threshold=config.threshold if threshold is None else threshold)


def _write(out_dir, name, text):
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(text)


def tune_threshold(config: ExperimentConfig, world: World, fp_dev: FirstPass, dev_wers: dict):
    """Threshold giving the lowest dev WER after homogeneous dev adaptation."""
    dev = world.corpora.dev
    results = []
    for theta in config.thresholds:
        acfg = config.adaptation(selection=_selection(config, theta))
        out = adapt_and_decode(world, dev, fp_dev.words(), dev, acfg, dev_wers)
        results.append((out.wer, theta))
    return min(results)[1], results


def run_two_pass(config: ExperimentConfig, world: World | None = None) -> TwoPassResult:
    """First pass, optional WER prediction, selection, adaptation, second pass."""
    world = build_world(config) if world is None else world
    out = config.output_dir
    corp = world.corpora
    eval_corpus = corp[config.eval_set]
    adapt_corpus = eval_corpus if config.condition == "homogeneous" else corp.dev
    uses_wers = config.selection != "none" or config.mode == "kld-soft"
    predicted = uses_wers and config.wer_source == "predicted"
    tuning = config.selection != "none" and config.topk == 0 and bool(config.thresholds)

    fp_eval = first_pass(eval_corpus, world, with_qe=predicted, n=config.nbest,
                         temperature=config.cn_temperature,
                         out_dir=out and os.path.join(out, "first_pass_eval"))
    baseline = wer_report(eval_corpus, fp_eval.words())
    _write(out, "baseline_wer.tsv", baseline.to_tsv())

    fp_dev = fp_eval if eval_corpus is corp.dev else None
    if fp_dev is None and (config.condition == "cross" or predicted or tuning):
        fp_dev = first_pass(corp.dev, world, with_qe=predicted, n=config.nbest,
                            temperature=config.cn_temperature,
                            out_dir=out and os.path.join(out, "first_pass_dev"))
    fp_adapt = fp_eval if config.condition == "homogeneous" else fp_dev
    if config.supervision == "manual":
        supervision = {u.id: u.words for u in adapt_corpus}
    else:
        supervision = fp_adapt.words()

    wer_map, qe_mae, dev_wers = None, None, None
    if predicted:
        if config.qe_model:
            qe_model = load_xrt(config.qe_model)
            dev_wers = predict_wers(qe_model, fp_dev)
        else:
            qe = train_qe(corp.dev, fp_dev, config.qe_folds, derive_seed(config.seed, 21))
            qe_model, dev_wers = qe.model, qe.dev_oof
        dev_oracle = oracle_wers(corp.dev, fp_dev)
        qe_mae = float(np.mean([abs(dev_wers[u] - dev_oracle[u]) for u in dev_wers]))
        wer_map = dev_wers if adapt_corpus is corp.dev else predict_wers(qe_model, fp_eval)
        _write(out, "predicted_wer.tsv",
               "".join(f"{u}\t{w:.6f}\n" for u, w in sorted(wer_map.items())))
    elif uses_wers:
        wer_map = oracle_wers(adapt_corpus, fp_adapt)
        if fp_dev is not None:
            dev_wers = oracle_wers(corp.dev, fp_dev)

    threshold = config.threshold if config.selection != "none" and config.topk == 0 else None
    if tuning:
        threshold, table = tune_threshold(config, world, fp_dev, dev_wers)
        _write(out, "threshold_tuning.tsv",
               "".join(f"{t:.2f}\t{100 * w:.2f}\n" for w, t in table))

    # the adaptation seed matches grid cell (0, 0), so a 1x1 grid reproduces this run
    acfg = config.adaptation(selection=_selection(config, threshold),
                             seed=derive_seed(config.seed, 0, 0))
    outcome = adapt_and_decode(world, adapt_corpus, supervision, eval_corpus, acfg, wer_map)
    if out:
        _write(out, "adapt_log.tsv", outcome.log)
        save_model(outcome.model, os.path.join(out, "adapted.mdl"))
        save_priors(world.priors, os.path.join(out, "priors.txt"))
        if acfg.selection is not None:
            kept, _ = select_ids([u.id for u in adapt_corpus if u.id in supervision],
                                 wer_map, acfg.selection)
            kept = set(kept)
            _write(out, "selection.tsv", "".join(
                f"{u.id}\t{wer_map[u.id]:.6f}\t{int(u.id in kept)}\n"
                for u in adapt_corpus if u.id in supervision))
    result = TwoPassResult(baseline.corpus_wer, outcome.wer, len(supervision), outcome.n_adapt,
                           threshold, acfg.alpha, qe_mae)
    _write(out, "report.tsv", result.to_tsv())
    return result


# --- grid -------------------------------------------------------------------------------------

@dataclass
class GridReport:
    sizes: list[int]
    alphas: list[float]
    wer: np.ndarray  # percent, NaN for failed cells
    failed: list = field(default_factory=list)
    capped: list = field(default_factory=list)  # (size, utterances available)

    @property
    def argmin(self):
        if np.all(np.isnan(self.wer)):
            return None
        i, j = np.unravel_index(np.nanargmin(self.wer), self.wer.shape)
        return self.sizes[i], self.alphas[j], float(self.wer[i, j])

    def to_tsv(self) -> str:
        lines = ["\t" + "\t".join(f"{a:.1f}" for a in self.alphas) + "\n"]
        for size, row in zip(self.sizes, self.wer):
            cells = ["" if np.isnan(v) else f"{v:.2f}" for v in row]
            lines.append(f"{size}\t" + "\t".join(cells) + "\n")
        best = self.argmin
        if best is not None:
            lines.append(f"# argmin\t{best[0]}\t{best[1]:.1f}\t{best[2]:.2f}\n")
        for size, available in self.capped:
            lines.append(f"# capped\t{size}\t{available}\n")
        for size, alpha, msg in self.failed:
            lines.append(f"# failed\t{size}\t{alpha:.1f}\t{msg}\n")
        return "".join(lines)


def run_grid(config: ExperimentConfig, world: World | None = None) -> GridReport:
    """One adaptation per (size, alpha) cell on a shared first pass.

    Without selection a cell adapts on a seeded random subset of ``size``
    utterances; with oracle or predicted selection it takes the ``size``
    utterances with the lowest sentence WER.
    """
    world = build_world(config) if world is None else world
    corp = world.corpora
    eval_corpus = corp[config.eval_set]
    adapt_corpus = eval_corpus if config.condition == "homogeneous" else corp.dev
    predicted = config.selection == "predicted"
    fp_eval = first_pass(eval_corpus, world, with_qe=predicted, n=config.nbest,
                         temperature=config.cn_temperature)
    fp_adapt = fp_dev = fp_eval
    if eval_corpus is not corp.dev and (config.condition == "cross" or predicted):
        fp_dev = first_pass(corp.dev, world, with_qe=predicted, n=config.nbest,
                            temperature=config.cn_temperature)
        if config.condition == "cross":
            fp_adapt = fp_dev
    if config.supervision == "manual":
        supervision = {u.id: u.words for u in adapt_corpus}
    else:
        supervision = fp_adapt.words()
    wer_map = None
    if predicted:
        qe = train_qe(corp.dev, fp_dev, config.qe_folds, derive_seed(config.seed, 21))
        wer_map = qe.dev_oof if adapt_corpus is corp.dev else predict_wers(qe.model, fp_eval)
    elif config.selection == "oracle":
        wer_map = oracle_wers(adapt_corpus, fp_adapt)

    ids = [u.id for u in adapt_corpus if u.id in supervision]
    sizes, alphas = config.sizes, config.alphas
    table = np.full((len(sizes), len(alphas)), np.nan)
    failed = []
    capped = [(size, len(ids)) for size in sizes if size > len(ids)]
    for size, available in capped:
        warnings.warn(f"grid size {size} exceeds the {available} adaptation utterances",
                      RuntimeWarning, stacklevel=2)
    for i, size in enumerate(sizes):
        for j, alpha in enumerate(alphas):
            cell_seed = derive_seed(config.seed, i, j)
            if wer_map is not None:
                chosen, _ = select_ids(ids, wer_map, SelectionSpec(
                    basis=config.selection, mode="topk", k=min(size, len(ids))))
            else:
                perm = np.random.default_rng(cell_seed).permutation(len(ids))
                chosen = [ids[k] for k in sorted(perm[:size])]
            sub = {u: supervision[u] for u in chosen}
            acfg = config.adaptation(alpha=alpha, seed=cell_seed)
            if acfg.mode == "kld-soft":
                acfg = dataclasses.replace(acfg, mode="kld-hard")
            try:
                out = adapt_and_decode(world, adapt_corpus, sub, eval_corpus, acfg)
                table[i, j] = 100.0 * out.wer
            except (ValueError, DecodeError) as exc:
                failed.append((size, alpha, str(exc).replace("\t", " ")))
    report = GridReport(sizes, alphas, table, failed, capped)
    _write(config.output_dir, "grid.tsv", report.to_tsv())
    return report


# --- n-best rescoring -----------------------------------------------------------------------

@dataclass
class RescoreResult:
    hyps: dict  # uid -> Hypothesis
    wer_before: float | None
    wer_after: float | None


def rescore_nbest(nbests: dict, lm, weight: float, lm_weight: float = 1.0,
                  references: dict | None = None) -> RescoreResult:
    """Re-rank n-best lists with an interpolated LM score.

    new score = acoustic + lm_weight * ((1 - weight) * decoding-LM logprob
    + weight * ``lm`` logprob), so ``weight = 0`` keeps the original ranking.
    """
    if lm is None:
        raise ValueError("rescoring needs a language model")
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must lie in [0, 1]")
    out = {}
    for uid, nb in nbests.items():
        scored = []
        for rank, h in enumerate(nb):
            extra = lm_weight * logprob(lm, h.words) if h.words else 0.0
            new = h.am_score + (1.0 - weight) * h.lm_score + weight * extra
            scored.append((-new, rank, h))
        scored.sort(key=lambda s: (s[0], s[1]))
        out[uid] = scored[0][2]
    before = after = None
    if references is not None:
        before = WerReport.build(references, {u: nb[0].words for u, nb in nbests.items()}).corpus_wer
        after = WerReport.build(references, {u: h.words for u, h in out.items()}).corpus_wer
    return RescoreResult(out, before, after)
