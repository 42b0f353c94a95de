"""Segmentation and adaptation losses on softmax probability maps.

All functions take B×C×H×W probabilities (the output of
:func:`dbda.tensor.softmax_channel`) and return graph-connected scalars.
Logarithms are taken of inputs clamped below by :data:`EPS`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-12


@dataclass(frozen=True)
class LossValue:
    tensor: Tensor
    value: float
    # False for the zero marker returned when no pixel contributes
    active: bool = True

    @classmethod
    def of(cls, t: Tensor, active: bool = True) -> LossValue:
        return cls(t, t.item(), active)


@dataclass(frozen=True)
class ClassDistribution:
    """Normalised soft class mass plus the raw soft counts it came from."""

    probs: Tensor
    counts: Tensor

    def numpy(self) -> np.ndarray:
        return self.probs.data

    def __len__(self) -> int:
        return self.probs.shape[0]


def _check_probs(probs: Tensor, name: str) -> None:
    if probs.ndim != 4:
        raise T.ShapeError(f"{name}: expected B×C×H×W probabilities, got shape {probs.shape}")


def cross_entropy(probs, labels, ignore_index: int | None = None) -> LossValue:
    """Mean of ``-log p[true class]`` over the non-ignored pixels."""
    probs = T.as_tensor(probs)
    _check_probs(probs, "cross_entropy")
    labels = np.asarray(labels)
    b, c, h, w = probs.shape
    if labels.shape != (b, h, w):
        raise T.ShapeError(f"cross_entropy: labels shape {labels.shape} vs probs shape {probs.shape}")
    keep = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    if not keep.any():
        raise ValueError("cross_entropy: every pixel is ignored")
    bad = labels[keep]
    bad = bad[(bad < 0) | (bad >= c)]
    if bad.size:
        raise ValueError(f"cross_entropy: label {int(bad[0])} outside [0, {c})")
    safe = np.where(keep, labels, 0)
    p_true = T.select(T.gather_channel(probs, safe), keep)
    nll = T.neg(T.log(T.clamp_min(p_true, EPS)))
    return LossValue.of(T.mean(nll))


def pseudo_labels(probs: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels (ties to the lowest class) and the mask of pixels at or above ``threshold``."""
    labels = probs.argmax(axis=1)
    confident = probs.max(axis=1) >= threshold
    return labels, confident


def pseudo_label_ce(probs_t, threshold: float) -> LossValue:
    """Cross entropy against the model's own confident argmax on the target batch."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"pseudo_label_ce: threshold must lie in (0, 1], got {threshold}")
    probs_t = T.as_tensor(probs_t)
    _check_probs(probs_t, "pseudo_label_ce")
    labels, confident = pseudo_labels(probs_t.data, threshold)
    if not confident.any():
        return LossValue(Tensor(0.0), 0.0, active=False)
    ignore = -1
    return cross_entropy(probs_t, np.where(confident, labels, ignore), ignore_index=ignore)


def entropy_min(probs_t) -> LossValue:
    """Per-pixel Shannon entropy normalised by ``log C``, averaged over pixels."""
    probs_t = T.as_tensor(probs_t)
    _check_probs(probs_t, "entropy_min")
    b, c, h, w = probs_t.shape
    if c < 2:
        raise ValueError(f"entropy_min: needs at least 2 classes, got {c}")
    plogp = T.mul(probs_t, T.log(T.clamp_min(probs_t, EPS)))
    per_pixel = T.sum_(plogp, axis=1)
    return LossValue.of(T.mul(T.mean(per_pixel), -1.0 / math.log(c)))


def soft_class_distribution(probs) -> ClassDistribution:
    """Sum probabilities per channel over batch and space, then normalise."""
    probs = T.as_tensor(probs)
    _check_probs(probs, "soft_class_distribution")
    c = probs.shape[1]
    per_channel = T.reshape(probs, (probs.shape[0], c, -1))
    counts = T.sum_(T.sum_(per_channel, axis=2), axis=0)
    return ClassDistribution(T.div(counts, T.sum_(counts)), counts)


def kl_distribution(p_s: ClassDistribution, p_t: ClassDistribution) -> LossValue:
    """``(1/C) * sum_c p_s[c] * log(p_s[c] / p_t[c])``; nonnegative, zero when equal."""
    s, t = p_s.probs, p_t.probs
    if s.shape != t.shape or s.ndim != 1:
        raise T.ShapeError(f"kl_distribution: distribution shapes {s.shape} and {t.shape} differ")
    s_c, t_c = T.clamp_min(s, EPS), T.clamp_min(t, EPS)
    terms = T.mul(s_c, T.sub(T.log(s_c), T.log(t_c)))
    return LossValue.of(T.mul(T.sum_(terms), 1.0 / s.shape[0]))


def distribution(probs) -> ClassDistribution:
    """Wrap an explicit C-vector (array or tensor) as a :class:`ClassDistribution`."""
    p = T.as_tensor(probs)
    if p.ndim != 1:
        raise T.ShapeError(f"distribution: expected a C-vector, got shape {p.shape}")
    return ClassDistribution(p, p)
