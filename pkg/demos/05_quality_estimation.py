"""WER prediction: 41 decode features and a tuned extremely-randomized-trees regressor."""
import numpy as np

from qeadapt.harness import ExperimentConfig, build_world, first_pass, oracle_wers, train_qe
from qeadapt.qe.xrt import xrt_predict

world = build_world(ExperimentConfig(n_train=300, n_dev=200, n_test=200))
dev, test = world.corpora.dev, world.corpora.test
fp_dev = first_pass(dev, world)
fp_test = first_pass(test, world)

qe = train_qe(dev, fp_dev, k=4, seed=0)
print("chosen hyper-parameters:", qe.params)
ids = sorted(fp_test.features)
truth = oracle_wers(test, fp_test)
y = np.array([truth[u] for u in ids])
pred = xrt_predict(qe.model, np.array([fp_test.features[u] for u in ids]))
dev_mean = np.mean(list(oracle_wers(dev, fp_dev).values()))
print(f"test MAE {np.mean(np.abs(pred - y)):.4f} vs constant dev mean {np.mean(np.abs(dev_mean - y)):.4f}")
