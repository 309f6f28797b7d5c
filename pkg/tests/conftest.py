import math

import numpy as np
import pytest

from qeadapt.corpus import Lexicon, Token
from qeadapt.ngram import BOS, EOS


class TableLm:
    """Bigram given as an explicit table; enough for building decoding graphs."""

    def __init__(self, words, rng):
        self.words = list(words)
        V = len(self.words)
        self.start = rng.dirichlet(np.ones(V + 1))  # last column: end marker
        self.trans = rng.dirichlet(np.ones(V + 1), size=V)

    def cond_logprob(self, word, history=()):
        prev = history[-1]
        row = self.start if prev == BOS else self.trans[self.words.index(prev)]
        col = len(self.words) if word == EOS else self.words.index(word)
        return math.log(row[col])


def tiny_lexicon(n_words, states=1, dim=2, seed=0):
    """Silence plus ``n_words`` words with ``states`` states each."""
    rng = np.random.default_rng(seed)
    phones = ["a", "b", "d", "e", "f", "g", "i"]
    classes = ["noun", "verb", "function", "number", "other"]
    tokens = [Token(0, "<sil>", ("sil",), "other", 1)]
    for i in range(n_words):
        tokens.append(Token(i + 1, f"w{i + 1}", (phones[i % len(phones)], phones[(i + 1) % 7]),
                            classes[i % 5], states))
    n_states = 1 + n_words * states
    pc = {"a": "vowel", "b": "stop", "d": "stop", "e": "vowel", "f": "fricative",
          "g": "stop", "i": "vowel", "sil": "other"}
    return Lexicon(tokens, pc, rng.normal(size=(n_states, dim)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL = dict(n_train=120, n_dev=40, n_test=60, hidden="32", lm_extra_sentences=300,
             adapt_epochs=4, nbest=3)


@pytest.fixture(scope="session")
def small_config():
    from qeadapt.harness import ExperimentConfig
    return ExperimentConfig(**SMALL)


@pytest.fixture(scope="session")
def small_world(small_config):
    from qeadapt.harness import build_world
    return build_world(small_config)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
