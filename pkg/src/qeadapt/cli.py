"""Command-line entry point: ``qeadapt <subcommand> ...``.

A corpus directory written by ``gen`` holds ``lexicon.tsv`` and one
sub-directory per split.  Errors end the process with a nonzero status and
one tab-separated line on stderr: ``error <subcommand> <type> <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from types import SimpleNamespace

import numpy as np

from . import harness
from .acoustic import (TrainSchedule, estimate_priors, init_model, load_model, load_priors,
                       one_hot, save_model, save_priors, train)
from .adaptation import AdaptationConfig, adapt, build_adaptation_set, format_log
from .corpus import (SILENCE_ID, CorpusSpec, gen_corpus, generator_alignment, read_corpus,
                     read_lexicon, write_corpus, write_lexicon)
from .decoder import DecodingGraph, build_cn, forced_align, nbest, parse_nbest
from .harness import ExperimentConfig, first_pass, read_config, rescore_nbest, write_config
from .ngram import dump_lm, load_lm, train_lm
from .qe.features import format_features, parse_features, train_class_lm
from .qe.xrt import XrtParams, dump_xrt, load_xrt, tune_cv, xrt_fit, xrt_predict
from .scoring import SelectionSpec, WerReport

SPLITS = ("train", "dev", "test")


# --- helpers ----------------------------------------------------------------------------

def _lexicon(corpus_dir):
    return read_lexicon(os.path.join(corpus_dir, "lexicon.tsv"))


def _split(corpus_dir, split, lexicon):
    return read_corpus(os.path.join(corpus_dir, split), lexicon, split, split)


def _read_hyps(path, lexicon) -> dict:
    """``utt-id token ...`` lines; silence surfaces are dropped."""
    lookup = lexicon.surface_map()
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out[parts[0]] = [lookup[s] for s in parts[1:] if lookup[s] != SILENCE_ID]
    return out


def _read_values(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split("\t")
            if len(parts) >= 2 and not line.startswith("#"):
                out[parts[0]] = float(parts[-1])
    return out


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text)


def _speaker(uid: str) -> str:
    return uid.split("_", 1)[0]


# --- subcommands ---------------------------------------------------------------------------

def cmd_gen(args):
    spec = CorpusSpec(seed=args.seed, vocab_size=args.vocab_size,
                      n_utts={"train": args.n_train, "dev": args.n_dev, "test": args.n_test},
                      length_range=(args.min_words, args.max_words), mismatch=args.mismatch)
    corpora = gen_corpus(spec)
    os.makedirs(args.out, exist_ok=True)
    write_lexicon(corpora.lexicon, os.path.join(args.out, "lexicon.tsv"))
    for split in SPLITS:
        write_corpus(corpora[split], os.path.join(args.out, split), corpora.lexicon)


def cmd_train_lm(args):
    lexicon = _lexicon(args.corpus)
    text = [u.words for u in _split(args.corpus, args.split, lexicon)]
    if args.classes:
        lm = train_class_lm(text, lexicon, order=args.order)
    else:
        lm = train_lm(text, order=args.order, discount=args.discount)
    dump_lm(lm, args.out)


def cmd_train_am(args):
    lexicon = _lexicon(args.corpus)
    corpus = _split(args.corpus, "train", lexicon)
    aligns = [generator_alignment(lexicon, u.reference, args.frames_per_state) for u in corpus]
    data = [(u.frames, one_hot(a, lexicon.n_states)) for u, a in zip(corpus, aligns)]
    n_cv = max(1, len(data) // 10)
    order = np.random.default_rng(args.seed).permutation(len(data))
    cv_idx = set(order[:n_cv].tolist())
    tr = [d for i, d in enumerate(data) if i not in cv_idx]
    cv = [d for i, d in enumerate(data) if i in cv_idx]
    layout = [lexicon.dim * (2 * args.context + 1)] + harness._ints(args.hidden) + [lexicon.n_states]
    model = init_model(args.seed, layout, args.context)
    schedule = TrainSchedule(learning_rate=args.learning_rate, max_epochs=args.max_epochs,
                             seed=args.seed)
    model, log = train(model, tr, schedule, cv)
    save_model(model, args.out)
    save_priors(estimate_priors(aligns, lexicon.n_states), args.priors)
    if args.log:
        _write(args.log, log.to_tsv())


def _world_from_files(args, lexicon, with_qe=False):
    graph = DecodingGraph(lexicon, load_lm(args.lm), args.lm_weight)
    lm_in = load_lm(args.lm_in) if with_qe else None
    lm_out = load_lm(args.lm_out) if with_qe else None
    class_lm = load_lm(args.class_lm) if with_qe else None
    # only the lexicon of the corpus bundle is needed downstream
    return harness.World(SimpleNamespace(lexicon=lexicon), graph, lm_in, lm_out, class_lm,
                         load_model(args.model), load_priors(args.priors))


def cmd_decode(args):
    lexicon = _lexicon(args.corpus)
    corpus = _split(args.corpus, args.split, lexicon)
    world = _world_from_files(args, lexicon, with_qe=args.features)
    if args.features:
        fp = first_pass(corpus, world, n=args.nbest, temperature=args.temperature,
                        out_dir=args.out)
    elif args.nbest > 1:
        fp = harness.FirstPass()
        for utt in corpus:
            nb = nbest(world.baseline, world.priors, utt, world.graph, n=args.nbest)
            fp.hyps[utt.id], fp.nbests[utt.id] = nb[0], nb
            fp.cns[utt.id] = build_cn(nb, args.temperature)
        harness.dump_first_pass(fp, lexicon, args.out)
    else:
        fp = harness.decode_corpus(world.baseline, world.priors, corpus, world.graph)
        harness.dump_first_pass(fp, lexicon, args.out)
    rep = harness.wer_report(corpus.subset(list(fp.hyps)), fp.words())
    _write(os.path.join(args.out, "wer.tsv"), rep.to_tsv())


def cmd_align(args):
    lexicon = _lexicon(args.corpus)
    corpus = _split(args.corpus, args.split, lexicon)
    graph = DecodingGraph(lexicon, load_lm(args.lm), args.lm_weight)
    model, priors = load_model(args.model), load_priors(args.priors)
    sup = _read_hyps(args.supervision, lexicon) if args.supervision else None
    lines = []
    for utt in corpus:
        ref = sup[utt.id] if sup is not None else utt.reference
        ali = forced_align(model, priors, utt, ref, graph)
        lines.append(f"{utt.id} {' '.join(str(s) for s in ali.states)}\n")
    _write(args.out, "".join(lines))


def cmd_qe_extract(args):
    lexicon = _lexicon(args.corpus)
    corpus = _split(args.corpus, args.split, lexicon)
    world = _world_from_files(args, lexicon, with_qe=True)
    fp = first_pass(corpus, world, with_qe=True, n=args.nbest, temperature=args.temperature)
    _write(args.out, format_features(sorted(fp.features.items())))
    if args.targets:
        wers = harness.oracle_wers(corpus, fp)
        _write(args.targets, "".join(f"{u}\t{w:.6f}\n" for u, w in sorted(wers.items())))


def cmd_qe_train(args):
    with open(args.features) as fh:
        ids, X = parse_features(fh.read())
    targets = _read_values(args.targets)
    y = np.array([targets[u] for u in ids])
    groups = [_speaker(u) for u in ids]
    grid = [XrtParams(n_bags=args.n_bags, trees_per_bag=t, k_features=k, n_min=m, seed=args.seed)
            for t in harness._ints(args.trees) for k in harness._ints(args.k_features)
            for m in harness._ints(args.n_min)]
    params, table = tune_cv(X, y, grid, min(args.folds, len(set(groups))), args.seed, groups)
    dump_xrt(xrt_fit(X, y, params), args.out)
    if args.log:
        _write(args.log, "".join(
            f"{p.trees_per_bag}\t{p.k_features}\t{p.n_min}\t{m:.6f}\n" for p, m in table))


def cmd_qe_predict(args):
    with open(args.features) as fh:
        ids, X = parse_features(fh.read())
    pred = xrt_predict(load_xrt(args.model), X)
    _write(args.out, "".join(f"{u}\t{p:.6f}\n" for u, p in zip(ids, pred)))


def cmd_adapt(args):
    lexicon = _lexicon(args.corpus)
    corpus = _split(args.corpus, args.split, lexicon)
    graph = DecodingGraph(lexicon, load_lm(args.lm), args.lm_weight)
    model, priors = load_model(args.model), load_priors(args.priors)
    if args.supervision:
        supervision = _read_hyps(args.supervision, lexicon)
    else:
        supervision = {u.id: u.words for u in corpus}
    wer_map = _read_values(args.wer) if args.wer else None
    selection = None
    if args.threshold is not None:
        selection = SelectionSpec(basis=args.wer_source, mode="threshold", threshold=args.threshold)
    elif args.topk:
        selection = SelectionSpec(basis=args.wer_source, mode="topk", k=args.topk)
    lr = args.learning_rate
    if lr is None:
        lr = 0.0005 if args.mode == "odlr" else 0.008
    cfg = AdaptationConfig(mode=args.mode, alpha=args.alpha, beta=args.beta,
                           wer_source=args.wer_source, selection=selection,
                           schedule=TrainSchedule(learning_rate=lr, max_epochs=args.max_epochs,
                                                  seed=args.seed))
    aset = build_adaptation_set(corpus, supervision, cfg, wer_map)
    result = adapt(model, priors, graph, aset, cfg)
    save_model(result.model, args.out)
    if args.log:
        _write(args.log, format_log(result))


def cmd_eval(args):
    lexicon = _lexicon(args.corpus)
    corpus = _split(args.corpus, args.split, lexicon)
    hyps = _read_hyps(args.hyp, lexicon)
    _write(args.out, WerReport.build({u.id: u.words for u in corpus}, hyps).to_tsv())


def _experiment_config(args) -> ExperimentConfig:
    overrides = {}
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    if args.preset:
        preset = harness.PRESETS[args.preset]
        overrides = {**preset, **overrides}
    return read_config(args.config, overrides)


def cmd_two_pass(args):
    config = _experiment_config(args)
    if config.output_dir:
        os.makedirs(config.output_dir, exist_ok=True)
        write_config(config, os.path.join(config.output_dir, "config.txt"))
    result = harness.run_two_pass(config)
    if not config.output_dir:
        sys.stdout.write(result.to_tsv())


def cmd_grid(args):
    config = _experiment_config(args)
    report = harness.run_grid(config)
    if not config.output_dir:
        sys.stdout.write(report.to_tsv())


def cmd_rescore(args):
    lexicon = _lexicon(args.corpus)
    graph = DecodingGraph(lexicon, load_lm(args.lm), args.lm_weight)
    with open(args.nbest) as fh:
        nbests = parse_nbest(fh.read(), lexicon, graph)
    refs = None
    if args.split:
        corpus = _split(args.corpus, args.split, lexicon)
        refs = {u.id: u.words for u in corpus if u.id in nbests}
    result = rescore_nbest(nbests, load_lm(args.rescore_lm), args.weight, args.lm_weight, refs)
    _write(args.out, "".join(f"{u} {' '.join(lexicon.surfaces(h.words))}\n"
                             for u, h in result.hyps.items()))
    if refs is not None:
        sys.stdout.write(f"wer_before\t{100 * result.wer_before:.2f}\n"
                         f"wer_after\t{100 * result.wer_after:.2f}\n")


# --- parser ----------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors follow the same one-line format as runtime errors."""

    def error(self, message):
        cmd = self.prog.split()[-1]
        msg = " ".join(message.split())
        self.exit(2, f"error\t{cmd}\tUsageError\t{msg}\n")


def _decoder_args(p, qe=False):
    p.add_argument("--corpus", required=True, help="corpus directory written by gen")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--model", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--lm", required=True, help="decoding bigram LM dump")
    p.add_argument("--lm-weight", type=float, default=1.0)
    if qe:
        p.add_argument("--lm-in", required=True)
        p.add_argument("--lm-out", required=True)
        p.add_argument("--class-lm", required=True)


def _experiment_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=sorted(harness.PRESETS))
    for f in dataclasses.fields(ExperimentConfig):
        kind = {"int": int, "float": float}.get(f.type, str)
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qeadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate synthetic train/dev/test corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-dev", type=int, default=160)
    p.add_argument("--n-test", type=int, default=1320)
    p.add_argument("--min-words", type=int, default=5)
    p.add_argument("--max-words", type=int, default=12)
    p.add_argument("--mismatch", type=float, default=0.6)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-lm", help="train an n-gram LM on a split's transcripts")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="train", choices=SPLITS)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--discount", type=float, default=0.75)
    p.add_argument("--classes", action="store_true", help="model lexical-class sequences")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("train-am", help="train the baseline acoustic model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--hidden", default="64")
    p.add_argument("--context", type=int, default=2)
    p.add_argument("--frames-per-state", type=int, default=3)
    p.add_argument("--learning-rate", type=float, default=0.008)
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train_am)

    p = sub.add_parser("decode", help="decode a split: 1-best, n-best, CN, WER")
    _decoder_args(p)
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--features", action="store_true", help="also dump QE features")
    p.add_argument("--lm-in")
    p.add_argument("--lm-out")
    p.add_argument("--class-lm")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("align", help="forced alignment to references or a hypothesis file")
    _decoder_args(p)
    p.add_argument("--supervision")
    p.add_argument("--out")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("qe-extract", help="decode and dump the 41 QE features")
    _decoder_args(p, qe=True)
    p.add_argument("--nbest", type=int, default=5)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--targets", help="also write oracle sentence WERs here")
    p.set_defaults(func=cmd_qe_extract)

    p = sub.add_parser("qe-train", help="tune and fit the WER regressor")
    p.add_argument("--features", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--n-bags", type=int, default=2)
    p.add_argument("--trees", default="10")
    p.add_argument("--k-features", default="8,20")
    p.add_argument("--n-min", default="5,20")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_qe_train)

    p = sub.add_parser("qe-predict", help="predict sentence WERs")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_qe_predict)

    p = sub.add_parser("adapt", help="adapt an acoustic model on a split")
    _decoder_args(p)
    p.add_argument("--supervision", help="hypothesis file; references when omitted")
    p.add_argument("--mode", default="kld-hard", choices=("kld-hard", "kld-soft", "odlr"))
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--wer", help="sentence WER file for selection or soft mode")
    p.add_argument("--wer-source", default="oracle", choices=("oracle", "predicted"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--topk", type=int, default=0)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="score a hypothesis file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--hyp", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("two-pass", help="first pass, selection, adaptation, second pass")
    _experiment_args(p)
    p.set_defaults(func=cmd_two_pass)

    p = sub.add_parser("grid", help="adaptation size x alpha sweep")
    _experiment_args(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("rescore", help="re-rank n-best lists with a higher-order LM")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=SPLITS, help="score against this split's references")
    p.add_argument("--nbest", required=True)
    p.add_argument("--lm", required=True, help="LM used for decoding")
    p.add_argument("--lm-weight", type=float, default=1.0)
    p.add_argument("--rescore-lm", required=True)
    p.add_argument("--weight", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rescore)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # one parseable line, nonzero status
        msg = " ".join(str(exc).split())
        sys.stderr.write(f"error\t{args.command}\t{type(exc).__name__}\t{msg}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
