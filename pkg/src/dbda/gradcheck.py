"""Finite-difference verification of analytic gradients.

Each check perturbs at least ``coords`` randomly chosen input coordinates by
``±step`` and compares the central difference against the gradient produced
by :func:`dbda.tensor.backward`, using
``|analytic - numeric| / max(1, |numeric|)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from . import model as Mdl
from . import tensor as T
from .data import SegBatch

SCOPES = ("ops", "losses", "model", "all")


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    max_abs_err: float
    coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28s} max_rel_err={self.max_rel_err:.3e} coords={self.coords}"


def check(
    name: str,
    fn: Callable[..., T.Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    coords: int = 100,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> CheckResult:
    """Compare ``backward(fn(*inputs))`` with central differences.

    ``fn`` maps tensors to a scalar tensor. Coordinates are drawn across all
    inputs in proportion to their size; when the inputs hold fewer than
    ``coords`` entries every entry is checked.
    """
    leaves = [T.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    T.backward(out)
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]

    sizes = np.array([x.size for x in leaves])
    total = int(sizes.sum())
    flat = np.arange(total) if total <= coords else rng.choice(total, size=coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def value(arrays):
        with T.no_grad():
            return fn(*[T.Tensor(a) for a in arrays]).item()

    base = [lf.data.copy() for lf in leaves]
    worst_rel = worst_abs = 0.0
    for k in flat:
        which = int(np.searchsorted(offsets, k, side="right") - 1)
        idx = np.unravel_index(int(k - offsets[which]), base[which].shape)
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[which][idx] += step
        minus[which][idx] -= step
        numeric = (value(plus) - value(minus)) / (2 * step)
        err = abs(analytic[which][idx] - numeric)
        worst_abs = max(worst_abs, err)
        worst_rel = max(worst_rel, err / max(1.0, abs(numeric)))
    return CheckResult(name, worst_rel, worst_abs, len(flat), tol)


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-300) + x, x)


def _projector(rng, shape):
    """Random weights that turn a tensor-valued op into a scalar."""
    r = rng.standard_normal(shape)
    return lambda t: T.sum_(T.mul(t, r))


def _probs(rng, b, c, h, w, scale=1.5):
    return rng.standard_normal((b, c, h, w)) * scale


def ops_suite(rng: np.random.Generator) -> list[CheckResult]:
    res = []
    shape = (10, 12)
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    proj = _projector(rng, shape)
    res.append(check("add", lambda x, y: proj(T.add(x, y)), [a, b], rng))
    res.append(check("sub", lambda x, y: proj(T.sub(x, y)), [a, b], rng))
    res.append(check("mul", lambda x, y: proj(T.mul(x, y)), [a, b], rng))
    res.append(check("div", lambda x, y: proj(T.div(x, y)), [a, np.abs(b) + 0.5], rng))
    proj_mm = _projector(rng, (10, 8))
    res.append(check("matmul", lambda x, y: proj_mm(T.matmul(x, y)),
                     [a, rng.standard_normal((12, 8))], rng))
    res.append(check("relu", lambda x: proj(T.relu(x)), [_away_from_zero(rng, shape)], rng))
    res.append(check("exp", lambda x: proj(T.exp(x)), [a], rng))
    res.append(check("log", lambda x: proj(T.log(x)), [np.abs(a) + 0.2], rng))
    proj_sum = _projector(rng, (12,))
    res.append(check("sum_axis", lambda x: proj_sum(T.sum_(x, axis=0)), [a], rng))
    res.append(check("mean", lambda x: T.mul(T.mean(T.mul(x, x)), 3.0), [a], rng))
    x4 = rng.standard_normal((2, 3, 6, 6))
    p_conv = _projector(rng, (2, 4, 6, 6))
    for d in (1, 2):
        res.append(check(
            f"conv2d_d{d}",
            lambda x, w, bb, d=d: p_conv(T.conv2d(x, w, bb, dilation=d)),
            [x4, rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)],
            rng,
        ))
    p_pool, p_up, p_soft = (
        _projector(rng, (2, 3, 3, 3)), _projector(rng, (2, 3, 12, 12)), _projector(rng, (2, 3, 6, 6))
    )
    res.append(check("avg_pool2", lambda x: p_pool(T.avg_pool2(x)), [x4], rng))
    res.append(check("upsample2", lambda x: p_up(T.upsample2(x)), [x4], rng))
    res.append(check("softmax_channel", lambda x: p_soft(T.softmax_channel(x)), [x4], rng))
    res.append(check("neg", lambda x: proj(T.neg(x)), [a], rng))
    res.append(check("clamp_min", lambda x: proj(T.clamp_min(x, 0.1)), [_away_from_zero(rng, shape) + 0.1], rng))
    proj_rs = _projector(rng, (4, 30))
    res.append(check("reshape", lambda x: proj_rs(T.reshape(x, (4, 30))), [a], rng))
    mask = rng.uniform(size=shape) < 0.6
    proj_sel = _projector(rng, (int(mask.sum()),))
    res.append(check("select", lambda x: proj_sel(T.select(x, mask)), [a], rng))
    index = rng.integers(0, 3, size=(2, 6, 6))
    p_gather = _projector(rng, (2, 6, 6))
    res.append(check("gather_channel", lambda x: p_gather(T.gather_channel(x, index)), [x4], rng))
    return res


def losses_suite(rng: np.random.Generator) -> list[CheckResult]:
    res = []
    logits = _probs(rng, 2, 4, 5, 5)
    labels = rng.integers(0, 4, size=(2, 5, 5))
    res.append(check(
        "cross_entropy",
        lambda z: L.cross_entropy(T.softmax_channel(z), labels).tensor,
        [logits], rng,
    ))
    res.append(check(
        "pseudo_label_ce",
        lambda z: L.pseudo_label_ce(T.softmax_channel(z), 0.4).tensor,
        [logits], rng,
    ))
    res.append(check(
        "entropy_min",
        lambda z: L.entropy_min(T.softmax_channel(z)).tensor,
        [logits], rng,
    ))
    proj = _projector(rng, (4,))
    res.append(check(
        "soft_class_distribution",
        lambda z: proj(L.soft_class_distribution(T.softmax_channel(z)).probs),
        [logits], rng,
    ))
    res.append(check(
        "kl_distribution",
        lambda zs, zt: L.kl_distribution(
            L.soft_class_distribution(T.softmax_channel(zs)),
            L.soft_class_distribution(T.softmax_channel(zt)),
        ).tensor,
        [logits, _probs(rng, 2, 4, 5, 5)], rng,
    ))
    return res


def dbda_objective(model: Mdl.SegModel, src: SegBatch, tgt: SegBatch, lambda_ent: float, lambda_dist: float):
    """Weighted objective as a function of the model's parameter tensors."""
    names = list(model.params)

    def fn(*params):
        m = Mdl.SegModel(model.config, dict(zip(names, params)))
        p_s = T.softmax_channel(Mdl.forward(m, src.images))
        p_t = T.softmax_channel(Mdl.forward(m, tgt.images))
        total = L.cross_entropy(p_s, src.labels).tensor
        total = T.add(total, T.mul(L.entropy_min(p_t).tensor, lambda_ent))
        dist = L.kl_distribution(L.soft_class_distribution(p_s), L.soft_class_distribution(p_t))
        return T.add(total, T.mul(dist.tensor, lambda_dist))

    return fn, [model.params[n].data for n in names]


def model_suite(rng: np.random.Generator) -> list[CheckResult]:
    cfg = Mdl.ModelConfig(num_classes=4, width=6, input_size=16)
    model = Mdl.build(cfg, seed=int(rng.integers(1 << 31)))
    x = rng.uniform(0, 1, size=(2, 3, 16, 16))
    res = []
    names = list(model.params)

    def mean_logit(*params):
        m = Mdl.SegModel(cfg, dict(zip(names, params)))
        return T.mean(Mdl.forward(m, x))

    res.append(check("model_mean_logit", mean_logit, [p.data for p in model.params.values()], rng))
    src = SegBatch(x, rng.integers(0, 4, size=(2, 16, 16)))
    tgt = SegBatch(rng.uniform(0, 1, size=(2, 3, 16, 16)), None)
    # weights large enough that every term moves the gradient measurably
    fn, params = dbda_objective(model, src, tgt, lambda_ent=0.5, lambda_dist=2.0)
    res.append(check("dbda_objective", fn, params, rng))
    return res


SUITES = {"ops": ops_suite, "losses": losses_suite, "model": model_suite}


def run(scope: str = "all", seed: int = 0) -> tuple[list[CheckResult], float]:
    """Run the suites in ``scope``; returns results and elapsed seconds."""
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {', '.join(SCOPES)}")
    names = list(SUITES) if scope == "all" else [scope]
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    results = [r for n in names for r in SUITES[n](rng)]
    return results, time.perf_counter() - start
