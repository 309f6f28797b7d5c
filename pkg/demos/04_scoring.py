"""Edit-distance alignment, WER and selection of utterances by WER."""
from qeadapt.scoring import SelectionSpec, edit_align, select_ids, sentence_wer

ref = "the cat sat on the mat".split()
hyp = "the cat sat the mat today".split()
ops, counts = edit_align(ref, hyp)
for op, r, h in ops:
    print(f"{op:4s} {r or '-':>5s} {h or '-':>5s}")
print(counts, f"WER {100 * sentence_wer(ref, hyp):.1f}%")

wers = {"u1": 0.0, "u2": 0.35, "u3": 0.08, "u4": 0.1, "u5": 0.6}
print("threshold 0.10 keeps", select_ids(sorted(wers), wers, SelectionSpec(threshold=0.1))[0])
print("top-2 keeps", select_ids(sorted(wers), wers, SelectionSpec(mode="topk", k=2))[0])
