"""Loss terms on hand-sized probability maps.

Each loss takes a B x C x H x W probability tensor. Here every map is a single
row of pixels so the numbers can be checked by hand.
"""
import numpy as np

from dbda import losses as L
from dbda.tensor import Tensor


def row(*pixels):
    arr = np.asarray(pixels, dtype=float)
    return Tensor(arr.T.reshape(1, arr.shape[1], 1, arr.shape[0]))


# %% Supervised cross entropy on the source batch
p = row([0.5, 0.5], [0.75, 0.25])
print("cross entropy      ", L.cross_entropy(p, np.array([[[0, 1]]])).value)  # (ln2 + ln4) / 2

# %% Entropy of the target predictions, scaled to [0, 1] by log C
for probs in ([0.5, 0.5], [0.8, 0.2], [1.0, 0.0]):
    print("entropy", probs, round(L.entropy_min(row(probs)).value, 6) + 0.0)

# %% Soft class distribution: per-class sums of probabilities over the batch
dist = L.soft_class_distribution(row([0.7, 0.3], [0.1, 0.9]))
print("counts", dist.counts.data, "distribution", dist.numpy())

# %% KL between source and target distributions is not symmetric
a, b = L.distribution([0.5, 0.5]), L.distribution([0.9, 0.1])
print("KL(a||b) =", round(L.kl_distribution(a, b).value, 6))
print("KL(b||a) =", round(L.kl_distribution(b, a).value, 6))

# %% Optional pseudo labels: only pixels at or above the threshold count
out = L.pseudo_label_ce(row([0.9, 0.1], [0.6, 0.4]), threshold=0.8)
print("pseudo-label CE", round(out.value, 6), "active:", out.active)
none = L.pseudo_label_ce(row([0.6, 0.4]), 0.95)
print("nothing confident: value", none.value, "active:", none.active)
