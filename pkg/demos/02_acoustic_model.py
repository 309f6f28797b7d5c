"""Training the baseline acoustic model with the halving schedule."""
from qeadapt.harness import ExperimentConfig, build_world
from qeadapt.decoder import viterbi
from qeadapt.scoring import sentence_wer

world = build_world(ExperimentConfig(n_train=400, n_dev=80, n_test=80))
model = world.baseline
print("layer sizes", model.sizes, "parameters", model.n_params())

errors = []
for utt in world.corpora.test:
    hyp, _ = viterbi(model, world.priors, utt, world.graph)
    errors.append(sentence_wer(utt.words, hyp.words))
print(f"mean sentence WER on the mismatched test split: {100 * sum(errors) / len(errors):.2f}%")
