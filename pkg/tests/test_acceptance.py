"""Acceptance criteria. Each test records a PASS/FAIL line shown in the pytest summary."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from dbda import cli
from dbda import config as C
from dbda import data as D
from dbda import gradcheck
from dbda import losses as L
from dbda import metrics as M
from dbda import model as Mdl
from dbda import tensor as T
from dbda import train as Tr

EXPERIMENT = Path(__file__).resolve().parents[1] / "experiments" / "synthetic_shift.cfg"


@pytest.mark.criterion(1, "gradient suite: every op and loss within 1e-4 over >= 100 coordinates, < 60 s")
def test_gradient_suite(criterion):
    results, elapsed = gradcheck.run("all", seed=0)
    names = {r.name for r in results}
    for op in ("add", "sub", "mul", "div", "neg", "relu", "exp", "log", "clamp_min", "sum_axis", "mean",
               "reshape", "select", "gather_channel", "matmul", "conv2d_d1", "conv2d_d2", "avg_pool2",
               "upsample2", "softmax_channel", "cross_entropy", "pseudo_label_ce", "entropy_min",
               "soft_class_distribution", "kl_distribution", "dbda_objective"):
        assert op in names
    worst = max(results, key=lambda r: r.max_rel_err)
    criterion["text"] = f"{len(results)} checks, worst {worst.name} {worst.max_rel_err:.2e}, {elapsed:.1f}s"
    assert all(r.coords >= 100 and r.tol == 1e-4 for r in results)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
    assert elapsed < 60


def _prob_map(vectors):
    arr = np.asarray(vectors, float)
    return T.Tensor(arr.T.reshape(1, arr.shape[1], 1, arr.shape[0]))


@pytest.mark.criterion(2, "loss oracles: entropy bounds, KL(p,p)=0, scalar values to 6 decimals")
def test_loss_oracles(criterion):
    for c in (2, 6):
        uniform = T.Tensor(np.full((2, c, 3, 3), 1.0 / c))
        assert abs(L.entropy_min(uniform).value - 1.0) <= 1e-9
        onehot = np.zeros((2, c, 3, 3))
        onehot[:, c - 1] = 1.0
        assert abs(L.entropy_min(T.Tensor(onehot)).value) <= 1e-9
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.dirichlet(np.ones(5))
        d = L.distribution(v)
        assert abs(L.kl_distribution(d, d).value) <= 1e-12
    # independent scalar computations with the math module
    pairs = [
        (L.cross_entropy(_prob_map([[0.5, 0.5]]), np.array([[[1]]])).value, math.log(2)),
        (L.cross_entropy(_prob_map([[0.5, 0.5], [0.75, 0.25]]), np.array([[[0, 1]]])).value,
         (math.log(2) + math.log(4)) / 2),
        (L.pseudo_label_ce(_prob_map([[0.9, 0.1]]), 0.8).value, -math.log(0.9)),
        (L.entropy_min(_prob_map([[0.8, 0.2]])).value, -(0.8 * math.log2(0.8) + 0.2 * math.log2(0.2))),
        (L.kl_distribution(L.distribution([0.5, 0.5]), L.distribution([0.9, 0.1])).value,
         0.5 * (0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1))),
        (L.kl_distribution(L.distribution([0.9, 0.1]), L.distribution([0.5, 0.5])).value,
         0.5 * (0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5))),
    ]
    for got, oracle in pairs:
        assert round(got, 6) == round(oracle, 6)
    assert [round(o, 6) for _, o in pairs] == [0.693147, 1.039721, 0.105361, 0.721928, 0.255413, 0.184032]
    criterion["text"] = f"{len(pairs)} scalar oracles"


@pytest.mark.criterion(3, "class distribution matches brute-force per-pixel summation on 50 inputs")
def test_class_distribution_oracle(criterion):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        b, c, h, w = rng.integers(1, 4), rng.integers(2, 7), rng.integers(1, 6), rng.integers(1, 6)
        probs = T.softmax_channel(T.Tensor(rng.standard_normal((b, c, h, w)) * 2)).data
        counts = [0.0] * c
        for bi in range(b):
            for y in range(h):
                for x in range(w):
                    for k in range(c):
                        counts[k] += float(probs[bi, k, y, x])
        total = sum(counts)
        dist = L.soft_class_distribution(T.Tensor(probs))
        worst = max(worst, float(np.max(np.abs(dist.counts.data - counts))))
        worst = max(worst, float(np.max(np.abs(dist.numpy() - np.array(counts) / total))))
        assert abs(float(dist.counts.data.sum()) - b * h * w) <= 1e-9
    criterion["text"] = f"max deviation {worst:.1e}"
    assert worst <= 1e-9


@pytest.mark.criterion(4, "metrics: hand-computed matrices and F1 = 2 IoU / (1 + IoU) on 1000 random matrices")
def test_metrics_oracle(criterion):
    cases = [
        # counts[true, pred], class, precision, recall, f1, iou
        ([[3, 2], [1, 4]], 0, 0.75, 0.6, 2 / 3, 0.5),
        ([[3, 2], [1, 4]], 1, 4 / 6, 0.8, 8 / 11, 4 / 7),
        ([[5, 0], [0, 5]], 1, 1.0, 1.0, 1.0, 1.0),
        ([[0, 4], [4, 0]], 0, 0.0, 0.0, 0.0, 0.0),
        ([[2, 1, 0], [0, 3, 1], [1, 0, 4]], 2, 0.8, 0.8, 0.8, 4 / 6),
        ([[10, 0, 0, 0], [2, 6, 2, 0], [0, 0, 0, 0], [0, 1, 0, 3]], 1, 6 / 7, 0.6, 12 / 17, 6 / 11),
    ]
    for counts, k, p, r, f1, iou in cases:
        rep = M.report(M.ConfusionMatrix(len(counts), np.array(counts)))
        np.testing.assert_allclose([rep.precision[k], rep.recall[k], rep.f1[k], rep.iou[k]], [p, r, f1, iou],
                                   atol=1e-12)
    rep = M.report(M.ConfusionMatrix(2, np.array([[3, 2], [1, 4]])))
    assert round(rep.f1[0], 6) == 0.666667 and rep.iou[0] == 0.5
    rng = np.random.default_rng(2)
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        counts = rng.integers(0, 20, size=(c, c))
        counts[0, 0] += 1
        rep = M.report(M.ConfusionMatrix(c, counts))
        ok = ~rep.undefined
        np.testing.assert_allclose(rep.f1[ok], 2 * rep.iou[ok] / (1 + rep.iou[ok]), atol=1e-12)
    criterion["text"] = f"{len(cases)} fixed matrices, 1000 random"


@pytest.mark.criterion(5, "source-only preset equals a loop that never touches target data, bitwise, 100 steps")
def test_preset_reduction(criterion):
    cfg = C.load(EXPERIMENT, {"train.preset": "source-only", "train.steps": 100})
    trained, _ = Tr.train(cfg)

    # reference: plain supervised SGD built only from the source images
    src_images, _ = Tr.synthetic_images(cfg.data, D.SOURCE)
    src = [t for s in src_images for t in D.tile(s, cfg.data.tile)]
    model = Mdl.build(cfg.model, cfg.seed)
    opt = Tr.SGD(model.params, cfg.momentum, cfg.weight_decay)
    # the epoch length is the number of (source, target) pairs, equal tile counts per domain
    pairs = len(src) // cfg.batch_size
    step, epoch = 0, 0
    while step < cfg.steps:
        for batch in D.source_batches(src, cfg.batch_size, [cfg.seed, epoch], pairs):
            if step == cfg.steps:
                break
            probs = T.softmax_channel(Mdl.forward(model, batch.images))
            model.zero_grad()
            T.backward(L.cross_entropy(probs, batch.labels).tensor)
            opt.step(model.params, Tr.poly_lr(cfg.lr, step, cfg.steps, cfg.poly_power))
            step += 1
        epoch += 1
    for name, p in model.params.items():
        assert p.data.tobytes() == trained.params[name].data.tobytes(), name
    criterion["text"] = f"{len(model.params)} parameter tensors identical"


def _median_miou(preset, seeds, splits):
    out = []
    for seed in seeds:
        cfg = C.load(EXPERIMENT, {"train.preset": preset, "train.seed": seed})
        model, _ = Tr.train(cfg, splits)
        out.append(Tr.evaluate(model, splits.target_test).mean_iou)
    return float(np.median(out)), out


@pytest.mark.slow
@pytest.mark.criterion(6, "directional ablation: dbda beats source-only by >= 0.03 and is >= dbda-dagger")
def test_directional_ablation(criterion):
    start = time.perf_counter()
    cfg = C.load(EXPERIMENT)
    assert cfg.model.num_classes == 4 and cfg.data.tile == 32 and cfg.steps == 2000
    splits = Tr.load_splits(cfg)
    assert len(splits.source_train) == len(splits.target_train) == 200
    seeds = (0, 1, 2)
    med = {p: _median_miou(p, seeds, splits) for p in ("source-only", "dbda-dagger", "dbda")}
    elapsed = time.perf_counter() - start
    criterion["text"] = ", ".join(f"{p} {m:.4f}" for p, (m, _) in med.items()) + f", {elapsed / 60:.1f} min"
    assert med["dbda"][0] - med["source-only"][0] >= 0.03
    assert med["dbda"][0] >= med["dbda-dagger"][0]
    assert elapsed < 30 * 60


@pytest.mark.slow
@pytest.mark.criterion(7, "two train runs with one config give byte-identical outputs")
def test_determinism(criterion, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(EXPERIMENT), "--out", str(tmp_path / name)]) == 0
    for f in ("steps.csv", "report.csv", "model.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    criterion["text"] = "steps.csv, report.csv, model.ckpt"


@pytest.mark.criterion(8, "poly_lr spot values")
def test_schedule(criterion):
    for lr0 in (0.01, 2.5e-4, 1.0):
        assert Tr.poly_lr(lr0, 0, 2000) == lr0
        assert Tr.poly_lr(lr0, 2000, 2000) == 0.0
        assert abs(Tr.poly_lr(lr0, 1000, 2000, 0.9) - 0.535887 * lr0) <= 1e-6
    criterion["text"] = "step 0, T/2, T"
