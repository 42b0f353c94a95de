"""Source-only vs. distribution alignment vs. the full objective on the shifted target.

The acceptance run uses 2000 steps and three seeds (about ten minutes on one
core). STEPS and SEEDS below trade fidelity for time.
"""
import numpy as np

from dbda import config as C
from dbda import train as Tr

STEPS = 2000
SEEDS = (0,)

base = C.load("experiments/synthetic_shift.cfg", {"train.steps": STEPS})
splits = Tr.load_splits(base)
print(len(splits.source_train), "source tiles,", len(splits.target_train), "target tiles,",
      len(splits.target_test), "target test tiles")

scores = {}
for preset in ("source-only", "minent", "dbda-dagger", "dbda"):
    for seed in SEEDS:
        cfg = C.load("experiments/synthetic_shift.cfg", {"train.steps": STEPS, "train.preset": preset, "train.seed": seed})
        model, records = Tr.train(cfg, splits)
        rep = Tr.evaluate(model, splits.target_test)
        scores.setdefault(preset, []).append(rep.mean_iou)
        print(f"{preset:12s} seed {seed}  target mIoU {rep.mean_iou:.4f}  "
              f"pixel acc {rep.pixel_accuracy:.4f}  final l_dist {records[-1].l_dist:.5f}")

# %%
for preset, vals in scores.items():
    print(f"{preset:12s} median mIoU {np.median(vals):.4f}")
