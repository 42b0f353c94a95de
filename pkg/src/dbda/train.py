"""Joint source/target optimisation with SGD, momentum and a polynomial schedule."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import losses as L
from . import metrics as M
from . import model as Mdl
from . import tensor as T
from .model import ModelConfig, SegModel

log = logging.getLogger(__name__)

PRESETS = ("source-only", "minent", "dbda-dagger", "dbda", "custom")

STEP_FIELDS = ("step", "lr", "l_seg", "l_ent", "l_dist", "total")


class NumericError(RuntimeError):
    """A loss term became NaN or infinite."""


@dataclass(frozen=True)
class DataConfig:
    # directory holding manifest.txt; synthetic data is generated in memory when unset
    manifest: str | None = None
    synthetic: D.SyntheticConfig = field(default_factory=D.SyntheticConfig)
    images_per_domain: int = 61
    test_fraction: float = 6 / 33
    tile: int = 32
    palette: str | None = None


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "dbda"
    lambda_ent: float = 0.001
    lambda_dist: float = 0.1
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    steps: int = 2000
    batch_size: int = 2
    seed: int = 0
    pseudo_label: bool = False
    pseudo_threshold: float = 0.9
    pseudo_weight: float = 1.0
    out_dir: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; expected one of {', '.join(PRESETS)}")
        if self.lambda_ent < 0 or self.lambda_dist < 0 or self.pseudo_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.pseudo_threshold <= 1.0:
            raise ValueError(f"pseudo_threshold must lie in (0, 1], got {self.pseudo_threshold}")

    @property
    def lambdas(self) -> tuple[float, float]:
        """(entropy weight, distribution weight) after the preset is applied."""
        if self.preset == "source-only":
            return 0.0, 0.0
        if self.preset == "minent":
            return self.lambda_ent, 0.0
        if self.preset == "dbda-dagger":
            return 0.0, self.lambda_dist
        return self.lambda_ent, self.lambda_dist

    @property
    def uses_target(self) -> bool:
        l1, l2 = self.lambdas
        return l1 > 0 or l2 > 0 or (self.pseudo_label and self.pseudo_weight > 0)


@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    l_seg: float
    l_ent: float
    l_dist: float
    total: float
    l_pl: float | None = None

    def row(self) -> list[str]:
        vals = [self.lr, self.l_seg, self.l_ent, self.l_dist, self.total]
        if self.l_pl is not None:
            vals.append(self.l_pl)
        return [str(self.step)] + [repr(float(v)) for v in vals]


def poly_lr(lr0: float, step: int, total: int, power: float = 0.9) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 - step / total) ** power


class SGD:
    """SGD with momentum and weight decay added to the gradient."""

    def __init__(self, params: dict[str, T.Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, params: dict[str, T.Tensor], lr: float) -> None:
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.momentum * self.buffers[name] + g
            self.buffers[name] = buf
            p.data = p.data - lr * buf
            p.grad = None


def _finite(name: str, value: float, step: int) -> float:
    if not math.isfinite(value):
        raise NumericError(f"step {step}: loss term {name} is {value}")
    return value


def objective(model: SegModel, src: D.SegBatch, tgt: D.SegBatch | None, cfg: TrainConfig):
    """Build the weighted loss graph.

    Returns ``(total, terms)`` where ``terms`` maps each term name to its float
    value. Terms with zero weight stay out of the graph and are evaluated
    without gradient tracking for logging only.
    """
    l1, l2 = cfg.lambdas
    p_s = T.softmax_channel(Mdl.forward(model, src.images))
    seg = L.cross_entropy(p_s, src.labels)
    total = seg.tensor
    terms = {"l_seg": seg.value, "l_ent": 0.0, "l_dist": 0.0}
    if tgt is None:
        return total, terms
    if cfg.uses_target:
        p_t = T.softmax_channel(Mdl.forward(model, tgt.images))
        ent = L.entropy_min(p_t)
        dist = L.kl_distribution(L.soft_class_distribution(p_s), L.soft_class_distribution(p_t))
        if l1 > 0:
            total = T.add(total, T.mul(ent.tensor, l1))
        if l2 > 0:
            total = T.add(total, T.mul(dist.tensor, l2))
        if cfg.pseudo_label:
            pl = L.pseudo_label_ce(p_t, cfg.pseudo_threshold)
            if pl.active and cfg.pseudo_weight > 0:
                total = T.add(total, T.mul(pl.tensor, cfg.pseudo_weight))
            terms["l_pl"] = pl.value
    else:
        with T.no_grad():
            p_t = T.softmax_channel(Mdl.forward(model, tgt.images))
            ent = L.entropy_min(p_t)
            dist = L.kl_distribution(
                L.soft_class_distribution(p_s.detach()), L.soft_class_distribution(p_t)
            )
            if cfg.pseudo_label:
                terms["l_pl"] = L.pseudo_label_ce(p_t, cfg.pseudo_threshold).value
    terms["l_ent"] = ent.value
    terms["l_dist"] = dist.value
    return total, terms


def joint_step(
    model: SegModel,
    src: D.SegBatch,
    tgt: D.SegBatch | None,
    cfg: TrainConfig,
    step: int,
    optimizer: SGD,
) -> StepRecord:
    """One forward/backward/update over a (source, target) batch pair."""
    if src.labels is None:
        raise ValueError("source batch must carry labels")
    lr = poly_lr(cfg.lr, step, cfg.steps, cfg.poly_power)
    total, terms = objective(model, src, tgt, cfg)
    for name, value in terms.items():
        _finite(name, value, step)
    total_value = _finite("total", total.item(), step)
    model.zero_grad()
    T.backward(total)
    optimizer.step(model.params, lr)
    return StepRecord(
        step=step,
        lr=lr,
        l_seg=terms["l_seg"],
        l_ent=terms["l_ent"],
        l_dist=terms["l_dist"],
        total=total_value,
        l_pl=terms.get("l_pl"),
    )


# ---------------------------------------------------------------- datasets


@dataclass
class Splits:
    source_train: list[D.SegSample]
    target_train: list[D.SegSample]
    target_test: list[D.SegSample]
    source_test: list[D.SegSample]


def _tiles(samples, size):
    return [t for s in samples for t in D.tile(s, size)]


def synthetic_images(cfg: DataConfig, domain: str) -> tuple[list[D.SegSample], list[D.SegSample]]:
    """Whole synthetic images of one domain, split into (train, test)."""
    n_train, n_test = D.split_counts(cfg.images_per_domain, cfg.test_fraction)
    # the two domains use disjoint index ranges so their layouts are unpaired
    offset = 0 if domain == D.SOURCE else cfg.images_per_domain
    images = D.generate_synthetic_domain(cfg.synthetic, domain, cfg.images_per_domain, start=offset)
    return images[:n_train], images[n_train:]


def read_manifest(directory) -> list[tuple[str, str, Path, Path | None]]:
    """Rows of (domain, split, image path, label path) from ``manifest.txt``."""
    directory = Path(directory)
    rows = []
    path = directory / "manifest.txt"
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ValueError(f"{path}:{lineno}: expected 'domain split image [label]'")
        domain, split, image = parts[:3]
        if domain not in (D.SOURCE, D.TARGET) or split not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: bad domain/split {domain!r}/{split!r}")
        label = directory / parts[3] if len(parts) == 4 else None
        rows.append((domain, split, directory / image, label))
    return rows


def load_splits(cfg: TrainConfig) -> Splits:
    dc = cfg.data
    c = cfg.model.num_classes
    if dc.manifest:
        palette = D.read_palette(dc.palette) if dc.palette else None
        groups: dict[tuple[str, str], list[D.SegSample]] = {}
        for domain, split, image, label in read_manifest(dc.manifest):
            s = D.load_raster_pair(image, label, palette=palette, num_classes=c, domain=domain)
            groups.setdefault((domain, split), []).append(s)
        src_train = groups.get((D.SOURCE, "train"), [])
        src_test = groups.get((D.SOURCE, "test"), [])
        tgt_train = groups.get((D.TARGET, "train"), [])
        tgt_test = groups.get((D.TARGET, "test"), [])
    else:
        if dc.synthetic.num_classes != c:
            raise ValueError(
                f"synthetic num_classes {dc.synthetic.num_classes} != model num_classes {c}"
            )
        src_train, src_test = synthetic_images(dc, D.SOURCE)
        tgt_train, tgt_test = synthetic_images(dc, D.TARGET)
    splits = Splits(
        source_train=_tiles(src_train, dc.tile),
        target_train=[
            D.SegSample(t.image, None, t.domain, t.pid) for t in _tiles(tgt_train, dc.tile)
        ],
        target_test=_tiles(tgt_test, dc.tile),
        source_test=_tiles(src_test, dc.tile),
    )
    if not splits.source_train or not splits.target_train:
        raise ValueError("both source and target training splits must be nonempty")
    if not splits.target_test:
        raise ValueError("target test split is empty")
    return splits


# ---------------------------------------------------------------- evaluation / run


def evaluate(model: SegModel, samples: list[D.SegSample], batch: int = 16) -> M.MetricReport:
    cm = M.ConfusionMatrix(model.config.num_classes)
    for i in range(0, len(samples), batch):
        chunk = D.stack(samples[i : i + batch])
        if chunk.labels is None:
            raise ValueError("evaluation samples must carry labels")
        cm = M.accumulate(cm, Mdl.predict(model, chunk.images), chunk.labels)
    return M.report(cm)


def steps_csv(records: list[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(STEP_FIELDS)
    if records and records[0].l_pl is not None:
        header.append("l_pl")
    w.writerow(header)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


@dataclass
class RunResult:
    report: M.MetricReport
    records: list[StepRecord]
    model: SegModel
    paths: dict[str, Path] = field(default_factory=dict)


def train(cfg: TrainConfig, splits: Splits | None = None, target: bool = True) -> tuple[SegModel, list[StepRecord]]:
    """Optimise a fresh model for ``cfg.steps`` steps.

    With ``target=False`` no target sample is read; only the target split's
    length is used to keep the same epoch schedule.
    """
    splits = splits or load_splits(cfg)
    model = Mdl.build(cfg.model, cfg.seed)
    opt = SGD(model.params, cfg.momentum, cfg.weight_decay)
    records: list[StepRecord] = []
    src, tgt = splits.source_train, splits.target_train
    pairs = min(len(src), len(tgt)) // cfg.batch_size
    l1, l2 = cfg.lambdas
    log.info("preset %s: lambda_ent=%g lambda_dist=%g", cfg.preset, l1, l2)
    epoch = 0
    while len(records) < cfg.steps:
        seed = [cfg.seed, epoch]
        if target:
            batches = D.batch_pairs(src, tgt, cfg.batch_size, seed)
        else:
            batches = ((b, None) for b in D.source_batches(src, cfg.batch_size, seed, pairs))
        for src_b, tgt_b in batches:
            if len(records) == cfg.steps:
                break
            rec = joint_step(model, src_b, tgt_b, cfg, len(records), opt)
            records.append(rec)
            if rec.step % 100 == 0:
                log.debug(
                    "step %d lr %.3g seg %.4f ent %.4f dist %.5f total %.4f",
                    rec.step, rec.lr, rec.l_seg, rec.l_ent, rec.l_dist, rec.total,
                )
        epoch += 1
    return model, records


def run(cfg: TrainConfig, out_dir=None) -> RunResult:
    """Train, evaluate on the target test split and write step log, report and checkpoint."""
    out = Path(out_dir or cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "steps": out / "steps.csv",
        "report": out / "report.csv",
        "checkpoint": out / "model.ckpt",
    }
    partial = paths["checkpoint"].with_suffix(".ckpt.partial")
    try:
        splits = load_splits(cfg)
        model, records = train(cfg, splits)
        rep = evaluate(model, splits.target_test)
        paths["steps"].write_text(steps_csv(records), newline="")
        M.write_report_csv(rep, paths["report"])
        Mdl.save(model, partial)
        os.replace(partial, paths["checkpoint"])
    except BaseException:
        partial.unlink(missing_ok=True)
        raise
    log.info("target mIoU %.4f, pixel accuracy %.4f", rep.mean_iou, rep.pixel_accuracy)
    return RunResult(rep, records, model, paths)
