"""Samples, raster ingestion, tiling, synthetic two-domain data and batch pairing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from . import netpbm

SOURCE = "source"
TARGET = "target"

# ISPRS 2D labelling colours, in class-index order
ISPRS_PALETTE: dict[tuple[int, int, int], int] = {
    (255, 255, 255): 0,  # impervious surfaces
    (0, 0, 255): 1,  # building
    (0, 255, 255): 2,  # low vegetation
    (0, 255, 0): 3,  # tree
    (255, 255, 0): 4,  # car
    (255, 0, 0): 5,  # clutter / background
}


@dataclass
class SegSample:
    image: np.ndarray  # 3×H×W float64 in [0, 1]
    label: np.ndarray | None  # H×W int64 class indices
    domain: str
    pid: str

    def validate(self, num_classes: int | None = None) -> SegSample:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.pid}: image must be 3×H×W, got {self.image.shape}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError(f"{self.pid}: image values outside [0, 1]")
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"{self.pid}: unknown domain {self.domain!r}")
        if self.label is not None:
            if self.label.shape != self.image.shape[1:]:
                raise ValueError(
                    f"{self.pid}: label shape {self.label.shape} does not match image {self.image.shape[1:]}"
                )
            if self.label.size and self.label.min() < 0:
                raise ValueError(f"{self.pid}: negative class index in label")
            if num_classes is not None and self.label.size and self.label.max() >= num_classes:
                raise ValueError(
                    f"{self.pid}: label value {int(self.label.max())} >= number of classes {num_classes}"
                )
        return self


@dataclass
class SegBatch:
    images: np.ndarray  # B×3×H×W
    labels: np.ndarray | None  # B×H×W

    def __len__(self) -> int:
        return len(self.images)


def stack(samples: Sequence[SegSample]) -> SegBatch:
    images = np.stack([s.image for s in samples])
    if all(s.label is not None for s in samples):
        return SegBatch(images, np.stack([s.label for s in samples]))
    return SegBatch(images, None)


# ---------------------------------------------------------------- raster files


def read_palette(path) -> dict[tuple[int, int, int], int]:
    """Parse ``R G B class_index`` lines; blank lines and ``#`` comments are skipped."""
    palette = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'R G B class_index', got {line!r}")
        r, g, b, c = (int(p) for p in parts)
        palette[(r, g, b)] = c
    return palette


def write_palette(path, palette: dict[tuple[int, int, int], int]) -> None:
    lines = [f"{r} {g} {b} {c}" for (r, g, b), c in sorted(palette.items(), key=lambda kv: kv[1])]
    Path(path).write_text("\n".join(lines) + "\n")


def encode_colors(label: np.ndarray, palette: dict[tuple[int, int, int], int]) -> np.ndarray:
    """Class-index map to an H×W×3 colour map."""
    lut = np.zeros((max(palette.values()) + 1, 3), dtype=np.uint8)
    for rgb, c in palette.items():
        lut[c] = rgb
    return lut[label]


def decode_colors(rgb: np.ndarray, palette: dict[tuple[int, int, int], int]) -> np.ndarray:
    """H×W×3 colour map to class indices; unknown colours raise."""
    key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    out = np.full(key.shape, -1, dtype=np.int64)
    for (r, g, b), c in palette.items():
        out[key == ((r << 16) | (g << 8) | b)] = c
    if (out < 0).any():
        y, x = np.argwhere(out < 0)[0]
        raise ValueError(f"unknown palette colour {tuple(int(v) for v in rgb[y, x])} at pixel ({y}, {x})")
    return out


def load_raster_pair(
    image_path,
    label_path=None,
    palette: dict[tuple[int, int, int], int] | None = None,
    num_classes: int | None = None,
    domain: str = SOURCE,
    pid: str | None = None,
) -> SegSample:
    """Read a P6 image and an optional P5 class-index or P6 colour label."""
    rgb = netpbm.read(image_path)
    if rgb.ndim != 3:
        raise ValueError(f"{image_path}: image must be a colour PPM (P6)")
    image = rgb.transpose(2, 0, 1).astype(np.float64) / 255.0
    label = None
    if label_path is not None:
        raw = netpbm.read(label_path)
        if raw.ndim == 3:
            if palette is None:
                raise ValueError(f"{label_path}: colour label map needs a palette")
            label = decode_colors(raw, palette)
        else:
            label = raw.astype(np.int64)
        if label.shape != image.shape[1:]:
            raise ValueError(
                f"dimension mismatch: image {image_path} is {image.shape[1:]}, "
                f"label {label_path} is {label.shape}"
            )
    sample = SegSample(image, label, domain, pid or Path(image_path).stem)
    return sample.validate(num_classes)


def save_raster_pair(sample: SegSample, image_path, label_path=None) -> None:
    rgb = np.round(sample.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    netpbm.write(image_path, rgb)
    if label_path is not None and sample.label is not None:
        netpbm.write(label_path, sample.label.astype(np.uint8))


# ---------------------------------------------------------------- tiling


def tile(sample: SegSample, size: int) -> list[SegSample]:
    """Non-overlapping ``size``×``size`` tiles in row-major order; remainders are dropped."""
    if size <= 0:
        raise ValueError(f"tile size must be positive, got {size}")
    _, h, w = sample.image.shape
    if size > h or size > w:
        raise ValueError(f"tile size {size} exceeds image size {h}x{w}")
    out = []
    for i in range(h // size):
        for j in range(w // size):
            ys, xs = slice(i * size, (i + 1) * size), slice(j * size, (j + 1) * size)
            out.append(
                SegSample(
                    sample.image[:, ys, xs].copy(),
                    None if sample.label is None else sample.label[ys, xs].copy(),
                    sample.domain,
                    f"{sample.pid}_r{i}c{j}",
                )
            )
    return out


def untile(tiles: Sequence[SegSample], rows: int, cols: int) -> SegSample:
    """Reassemble a row-major grid produced by :func:`tile`."""
    if len(tiles) != rows * cols:
        raise ValueError(f"expected {rows * cols} tiles, got {len(tiles)}")
    image = np.concatenate(
        [np.concatenate([t.image for t in tiles[r * cols : (r + 1) * cols]], axis=2) for r in range(rows)],
        axis=1,
    )
    label = None
    if all(t.label is not None for t in tiles):
        label = np.concatenate(
            [np.concatenate([t.label for t in tiles[r * cols : (r + 1) * cols]], axis=1) for r in range(rows)],
            axis=0,
        )
    return SegSample(image, label, tiles[0].domain, tiles[0].pid.rsplit("_r", 1)[0])


# ---------------------------------------------------------------- synthetic domains


@dataclass(frozen=True)
class Appearance:
    """Per-domain rendering: ``clip(gain * smooth(image + noise) + bias, 0, 1)``."""

    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise: float = 0.05
    smooth: float = 0.0


@dataclass(frozen=True)
class SyntheticConfig:
    canvas: int = 64
    num_classes: int = 4
    # mean number of shapes per canvas
    density: float = 6.0
    # per-class RGB base colours; derived from the seed when empty
    class_colors: tuple[tuple[float, float, float], ...] = ()
    # per-pixel texture amplitude shared by both domains
    texture: float = 0.08
    source: Appearance = field(default_factory=Appearance)
    target: Appearance = field(default_factory=Appearance)
    seed: int = 0

    def appearance(self, domain: str) -> Appearance:
        if domain == SOURCE:
            return self.source
        if domain == TARGET:
            return self.target
        raise ValueError(f"unknown domain {domain!r}")

    def colors(self) -> np.ndarray:
        if self.class_colors:
            if len(self.class_colors) != self.num_classes:
                raise ValueError(
                    f"{len(self.class_colors)} class colours given for {self.num_classes} classes"
                )
            return np.asarray(self.class_colors, dtype=np.float64)
        rng = np.random.default_rng([self.seed, 0xC0105])
        return rng.uniform(0.15, 0.85, size=(self.num_classes, 3))


def _draw_labels(rng: np.random.Generator, size: int, num_classes: int, density: float) -> np.ndarray:
    label = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.poisson(density)):
        cls = int(rng.integers(1, num_classes))
        kind = rng.integers(3)
        cy, cx = rng.uniform(0, size, 2)
        if kind == 0:  # rectangle
            hh, hw = rng.uniform(size / 16, size / 5, 2)
            mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        elif kind == 1:  # ellipse
            ry, rx = rng.uniform(size / 14, size / 5, 2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:  # stripe
            theta = rng.uniform(0, np.pi)
            half = rng.uniform(1.0, size / 12)
            dist = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta)
            mask = np.abs(dist) <= half
        label[mask] = cls
    return label


def _render(cfg: SyntheticConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Domain-independent label map and clean image for one sample index."""
    rng = np.random.default_rng([cfg.seed, index, 0])
    label = _draw_labels(rng, cfg.canvas, cfg.num_classes, cfg.density)
    base = cfg.colors()[label].transpose(2, 0, 1)
    texture = cfg.texture * rng.standard_normal((1, cfg.canvas, cfg.canvas))
    return label, base + texture


def _appearance(cfg: SyntheticConfig, image: np.ndarray, look: Appearance, index: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, index, 1])
    noise = rng.standard_normal(image.shape)
    img = image + look.noise * noise
    if look.smooth > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, look.smooth, look.smooth), mode="nearest")
    gain = np.asarray(look.gain)[:, None, None]
    bias = np.asarray(look.bias)[:, None, None]
    img = np.clip(gain * img + bias, 0.0, 1.0)
    # quantise to 8 bits so in-memory samples equal their PPM round trip
    return np.round(img * 255.0) / 255.0


def generate_synthetic_domain(cfg: SyntheticConfig, domain: str, n: int, start: int = 0) -> list[SegSample]:
    """``n`` labelled samples of ``domain``; index ``i`` has the same labels in both domains."""
    look = cfg.appearance(domain)
    out = []
    for i in range(start, start + n):
        label, clean = _render(cfg, i)
        image = _appearance(cfg, clean, look, i)
        out.append(SegSample(image, label, domain, f"{domain}_{i:05d}"))
    return out


def split_counts(n: int, test_fraction: float) -> tuple[int, int]:
    """(train, test) image counts; 33 images at 6/33 give 27/6."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    n_test = int(round(n * test_fraction))
    return n - n_test, n_test


# ---------------------------------------------------------------- pairing


def _epoch_rngs(seed) -> tuple[np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence(list(seed) if isinstance(seed, (list, tuple)) else [seed])
    rng_s, rng_t = (np.random.default_rng(s) for s in ss.spawn(2))
    return rng_s, rng_t


def _check_pairing(n_src: int, n_tgt: int, batch: int) -> int:
    if not n_src or not n_tgt:
        raise ValueError("both datasets must be nonempty")
    n = min(n_src, n_tgt)
    if batch < 1 or batch > n:
        raise ValueError(f"batch size {batch} must lie in [1, {n}]")
    return n // batch


def batch_pairs(
    src: Sequence[SegSample], tgt: Sequence[SegSample], batch: int, seed
) -> Iterator[tuple[SegBatch, SegBatch]]:
    """One epoch of (source, target) batches; the longer set is truncated.

    Each side is shuffled by its own stream derived from ``seed``, so the
    source order does not depend on the target set.
    """
    pairs = _check_pairing(len(src), len(tgt), batch)
    rng_s, rng_t = _epoch_rngs(seed)
    order_s = rng_s.permutation(len(src))
    order_t = rng_t.permutation(len(tgt))
    for k in range(pairs):
        sl = slice(k * batch, (k + 1) * batch)
        yield stack([src[i] for i in order_s[sl]]), stack([tgt[i] for i in order_t[sl]])


def source_batches(src: Sequence[SegSample], batch: int, seed, pairs: int) -> Iterator[SegBatch]:
    """The source half of :func:`batch_pairs` for an epoch of ``pairs`` batches."""
    rng_s, _ = _epoch_rngs(seed)
    order_s = rng_s.permutation(len(src))
    for k in range(pairs):
        yield stack([src[i] for i in order_s[k * batch : (k + 1) * batch]])


def with_domain(samples: Sequence[SegSample], domain: str) -> list[SegSample]:
    return [replace(s, domain=domain) for s in samples]
