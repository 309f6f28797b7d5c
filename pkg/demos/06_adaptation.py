"""KLD-regularized adaptation (hard and soft) and the output-transform variant."""
from qeadapt.harness import ExperimentConfig, run_two_pass

base = ExperimentConfig(seed=1, n_test=300)
for label, cfg in [
    ("full set, hard, alpha 0.3", base),
    ("full set, alpha 0.0 (plain retraining)", base.replace(alpha=0.0)),
    ("full set, soft, beta 0.5", base.replace(mode="kld-soft", beta=0.5)),
    ("oracle WER <= 10%, alpha 0.1", base.replace(selection="oracle", threshold=0.1, alpha=0.1)),
    ("output transform only", base.replace(mode="odlr")),
]:
    r = run_two_pass(cfg)
    print(f"{label:40s} baseline {100 * r.baseline_wer:5.2f}  adapted {100 * r.adapted_wer:5.2f}  "
          f"({r.n_selected} sentences)")
