"""Synthetic corpora and Kneser-Ney language models.

Generates train/dev/test splits with disjoint speakers, then compares
bigram and trigram perplexities on held-out transcripts.
"""
from qeadapt.corpus import CorpusSpec, check_split_hygiene, gen_corpus
import math

from qeadapt.ngram import logprob, train_lm

corpora = gen_corpus(CorpusSpec(seed=0, n_utts={"train": 200, "dev": 60, "test": 60}))
check_split_hygiene(corpora.train, corpora.dev, corpora.test)
lex = corpora.lexicon
utt = corpora.train.utterances[0]
print(f"{lex.n_states} HMM states, frame dim {lex.dim}")
print(f"first utterance {utt.id} (speaker {utt.speaker}): {len(utt.frames)} frames, "
      f"words {lex.surfaces(utt.words)}")

train_text = [u.words for u in corpora.train]
extra = corpora.sample_text(2000, seed=5)
held_out = [u.words for u in corpora.test]


def corpus_perplexity(lm, sentences):
    """Per-token perplexity over whole sentences, end markers included."""
    total = sum(logprob(lm, s) for s in sentences)
    return math.exp(-total / sum(len(s) + 1 for s in sentences))


for order in (1, 2, 3):
    small = train_lm(train_text, order=order)
    large = train_lm(train_text + extra, order=order)
    print(f"order {order}: perplexity {corpus_perplexity(small, held_out):6.2f} (train only), "
          f"{corpus_perplexity(large, held_out):6.2f} (+2000 generator sentences)")
