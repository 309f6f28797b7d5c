"""Two-pass decoding with predicted-WER selection, then a size x alpha grid."""
import sys
import tempfile

from qeadapt.harness import ExperimentConfig, run_grid, run_two_pass

out = tempfile.mkdtemp(prefix="qeadapt-")
cfg = ExperimentConfig(seed=2, n_test=300, selection="predicted", tune_thresholds="0.1,0.2,0.3",
                       output_dir=out)
r = run_two_pass(cfg)
print(f"pWER selection: threshold {r.threshold} tuned on dev, {r.n_selected} sentences, "
      f"WER {100 * r.baseline_wer:.2f} -> {100 * r.adapted_wer:.2f}; artifacts in {out}")

grid = run_grid(ExperimentConfig(seed=2, n_test=300, grid_sizes="25,100,300",
                                 grid_alphas="0.0,0.3,0.7"))
sys.stdout.write(grid.to_tsv())
