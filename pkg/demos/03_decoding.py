"""Viterbi, n-best lists, confusion networks and forced alignment for one utterance."""
from qeadapt.decoder import build_cn, forced_align, format_cn, format_nbest, nbest, viterbi
from qeadapt.harness import ExperimentConfig, build_world

world = build_world(ExperimentConfig(n_train=200, n_dev=40, n_test=40))
lex, graph = world.lexicon, world.graph
utt = world.corpora.test.utterances[3]
print("reference:", " ".join(lex.surfaces(utt.words)))

best, _ = viterbi(world.baseline, world.priors, utt, graph)
print(f"1-best: {' '.join(lex.surfaces(best.words))}  "
      f"(am {best.am_score:.1f}, lm {best.lm_score:.1f})")

nb = nbest(world.baseline, world.priors, utt, graph, n=5)
print(format_nbest(utt.id, nb, lex), end="")
print(format_cn(utt.id, build_cn(nb), lex), end="")

ali = forced_align(world.baseline, world.priors, utt, utt.words, graph)
print("forced-alignment spans (token, start, end):", ali.spans)
