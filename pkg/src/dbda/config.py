"""Plain-text ``key = value`` experiment files with ``[model]``, ``[train]``, ``[data]`` and ``[losses]`` sections.

Example::

    [train]
    preset = dbda
    steps = 2000

    [data]
    target_gain = 0.6,0.6,0.6

Blank lines and ``#`` comments are ignored. Unknown sections or keys, and
keys given twice, are errors that report the offending line.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import data as D
from .model import ModelConfig
from .train import DataConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _floats(n: int | None = None) -> Callable[[str], tuple[float, ...]]:
    def parse(s: str) -> tuple[float, ...]:
        vals = tuple(float(v) for v in s.split(",") if v.strip())
        if n is not None and len(vals) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return vals

    return parse


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _colors(s: str) -> tuple[tuple[float, float, float], ...]:
    if not s:
        return ()
    return tuple(_floats(3)(part) for part in s.split(";"))


def _opt_str(s: str) -> str | None:
    return s or None


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    parse: Callable[[str], Any]
    default: str
    doc: str

    @property
    def full(self) -> str:
        return f"{self.section}.{self.name}"


KEYS: tuple[Key, ...] = (
    Key("model", "num_classes", int, "4", "number of classes C (>= 2)"),
    Key("model", "width", int, "16", "channels of every conv block"),
    Key("model", "block_dilations", _ints, "1,1,2", "dilation of each 3x3 conv block"),
    Key("model", "aspp_rates", _ints, "1,2,4", "ASPP branch dilation rates (6,12,18,24 for >= 512 inputs)"),
    Key("model", "downsample", int, "2", "1 or 2; 2 pools after the first block and upsamples the logits"),
    Key("train", "preset", str, "dbda", "source-only | minent | dbda-dagger | dbda | custom"),
    Key("train", "lr", float, "0.001", "initial learning rate"),
    Key("train", "momentum", float, "0.9", "SGD momentum"),
    Key("train", "weight_decay", float, "0.0001", "L2 weight decay added to the gradient"),
    Key("train", "poly_power", float, "0.9", "exponent of the polynomial learning-rate decay"),
    Key("train", "steps", int, "2000", "number of optimisation steps T"),
    Key("train", "batch_size", int, "2", "images per domain per step"),
    Key("train", "seed", int, "0", "model initialisation and batch-order seed (--seed overrides)"),
    Key("train", "out_dir", str, "runs/default", "directory for steps.csv, report.csv, model.ckpt (--out overrides)"),
    Key("losses", "lambda_ent", float, "0.001", "weight of the target entropy loss"),
    Key("losses", "lambda_dist", float, "0.1", "weight of the class-distribution KL loss"),
    Key("losses", "pseudo_label", _bool, "false", "add thresholded pseudo-label cross entropy on the target"),
    Key("losses", "pseudo_threshold", float, "0.9", "confidence threshold in (0, 1] for pseudo labels"),
    Key("losses", "pseudo_weight", float, "1.0", "weight of the pseudo-label loss when enabled"),
    Key("data", "manifest", _opt_str, "", "dataset directory with manifest.txt; empty = generate synthetic data in memory"),
    Key("data", "palette", _opt_str, "", "palette file (R G B class) for colour label maps"),
    Key("data", "tile", int, "32", "tile size; also the model input size"),
    Key("data", "images_per_domain", int, "61", "synthetic images per domain before the train/test split"),
    Key("data", "test_fraction", float, "0.181818", "fraction of images held out for testing (6/33)"),
    Key("data", "seed", int, "0", "synthetic generator seed (--seed overrides for generate)"),
    Key("data", "canvas", int, "64", "synthetic image side length"),
    Key("data", "density", float, "6.0", "mean number of shapes per synthetic image"),
    Key("data", "texture", float, "0.08", "per-pixel texture amplitude shared by both domains"),
    Key("data", "class_colors", _colors, "", "r,g,b;r,g,b;... base colour per class; empty = seeded"),
    Key("data", "source_gain", _floats(3), "1,1,1", "source per-channel gain"),
    Key("data", "source_bias", _floats(3), "0,0,0", "source per-channel bias"),
    Key("data", "source_noise", float, "0.05", "source noise standard deviation"),
    Key("data", "source_smooth", float, "0", "source Gaussian smoothing radius"),
    Key("data", "target_gain", _floats(3), "1,1,1", "target per-channel gain"),
    Key("data", "target_bias", _floats(3), "0,0,0", "target per-channel bias"),
    Key("data", "target_noise", float, "0.05", "target noise standard deviation"),
    Key("data", "target_smooth", float, "0", "target Gaussian smoothing radius"),
)

_BY_NAME = {(k.section, k.name): k for k in KEYS}
SECTIONS = tuple(dict.fromkeys(k.section for k in KEYS))


def keys_help() -> str:
    lines = ["recognised config keys (section.key = default: description):"]
    for k in KEYS:
        lines.append(f"  {k.full} = {k.default or '(empty)'}: {k.doc}")
    return "\n".join(lines)


def parse_text(text: str, origin: str = "<config>") -> dict[str, Any]:
    """Parse config text into a ``{"section.key": value}`` dict including defaults."""
    raw = {k.full: (k.default, None) for k in KEYS}
    seen: set[str] = set()
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{origin}:{lineno}: unknown section [{section}]")
            continue
        name, eq, value = line.partition("=")
        name, value = name.strip(), value.strip()
        if not eq:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        sec = section
        if "." in name and section is None:
            sec, name = name.split(".", 1)
        if sec is None:
            raise ConfigError(f"{origin}:{lineno}: key {name!r} outside any section")
        if (sec, name) not in _BY_NAME:
            raise ConfigError(f"{origin}:{lineno}: unknown key {sec}.{name}")
        full = f"{sec}.{name}"
        if full in seen:
            raise ConfigError(f"{origin}:{lineno}: key {full} given twice")
        seen.add(full)
        raw[full] = (value, lineno)
    out = {}
    for k in KEYS:
        value, lineno = raw[k.full]
        try:
            out[k.full] = k.parse(value)
        except ValueError as e:
            where = f"{origin}:{lineno}" if lineno else origin
            raise ConfigError(f"{where}: bad value {value!r} for {k.full}: {e}") from None
    return out


def build(values: dict[str, Any]) -> TrainConfig:
    v = values
    c = v["model.num_classes"]
    synthetic = D.SyntheticConfig(
        canvas=v["data.canvas"],
        num_classes=c,
        density=v["data.density"],
        class_colors=v["data.class_colors"],
        texture=v["data.texture"],
        source=D.Appearance(v["data.source_gain"], v["data.source_bias"], v["data.source_noise"], v["data.source_smooth"]),
        target=D.Appearance(v["data.target_gain"], v["data.target_bias"], v["data.target_noise"], v["data.target_smooth"]),
        seed=v["data.seed"],
    )
    data = DataConfig(
        manifest=v["data.manifest"],
        synthetic=synthetic,
        images_per_domain=v["data.images_per_domain"],
        test_fraction=v["data.test_fraction"],
        tile=v["data.tile"],
        palette=v["data.palette"],
    )
    model = ModelConfig(
        num_classes=c,
        width=v["model.width"],
        block_dilations=v["model.block_dilations"],
        aspp_rates=v["model.aspp_rates"],
        downsample=v["model.downsample"],
        input_size=v["data.tile"],
    )
    try:
        return TrainConfig(
            preset=v["train.preset"],
            lambda_ent=v["losses.lambda_ent"],
            lambda_dist=v["losses.lambda_dist"],
            lr=v["train.lr"],
            momentum=v["train.momentum"],
            weight_decay=v["train.weight_decay"],
            poly_power=v["train.poly_power"],
            steps=v["train.steps"],
            batch_size=v["train.batch_size"],
            seed=v["train.seed"],
            pseudo_label=v["losses.pseudo_label"],
            pseudo_threshold=v["losses.pseudo_threshold"],
            pseudo_weight=v["losses.pseudo_weight"],
            out_dir=v["train.out_dir"],
            model=model,
            data=data,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load(path, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Read an experiment file; ``overrides`` replace parsed values by full key name."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    values = parse_text(text, str(path))
    for key, value in (overrides or {}).items():
        if key not in values:
            raise ConfigError(f"unknown override key {key}")
        values[key] = value
    return build(values)
