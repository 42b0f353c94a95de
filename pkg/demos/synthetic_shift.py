"""The synthetic two-domain generator.

Both domains draw labels from the same shape process. Only the appearance
transform differs, so any drop in target accuracy comes from the shift.
"""
import numpy as np

from dbda import config as C
from dbda import data as D
from dbda import train as Tr

cfg = C.load("experiments/synthetic_shift.cfg")
src_train, src_test = Tr.synthetic_images(cfg.data, D.SOURCE)
tgt_train, tgt_test = Tr.synthetic_images(cfg.data, D.TARGET)
print("images per domain (train, test):", len(src_train), len(src_test))

# %% Label frequencies match across domains
for name, samples in (("source", src_train), ("target", tgt_train)):
    hist = np.bincount(np.concatenate([s.label.ravel() for s in samples]), minlength=cfg.model.num_classes)
    print(name, "class frequencies", np.round(hist / hist.sum(), 3))

# %% Pixel statistics do not
for name, samples in (("source", src_train), ("target", tgt_train)):
    px = np.stack([s.image for s in samples])
    print(name, "channel mean", np.round(px.mean(axis=(0, 2, 3)), 3), "std", np.round(px.std(axis=(0, 2, 3)), 3))

# %% Tiles feed the model
tiles = D.tile(src_train[0], cfg.data.tile)
print(len(tiles), "tiles of", tiles[0].image.shape, "pids", [t.pid for t in tiles])
