"""Small dilated-convolution segmentation network with an ASPP head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Atrous rates of the full-resolution setting; usable from 512×512 inputs.
DEEPLAB_ASPP_RATES = (6, 12, 18, 24)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    width: int = 16
    # one entry per 3×3 conv block; later blocks dilate instead of striding
    block_dilations: tuple[int, ...] = (1, 1, 2)
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    downsample: int = 2
    input_size: int = 32
    in_channels: int = 3

    def header(self) -> dict[str, str]:
        """Architecture fields echoed into checkpoint headers."""
        return {
            "num_classes": str(self.num_classes),
            "width": str(self.width),
            "block_dilations": ",".join(map(str, self.block_dilations)),
            "aspp_rates": ",".join(map(str, self.aspp_rates)),
            "downsample": str(self.downsample),
            "input_size": str(self.input_size),
            "in_channels": str(self.in_channels),
        }

    @classmethod
    def from_header(cls, header: dict[str, str]) -> ModelConfig:
        def ints(s):
            return tuple(int(v) for v in s.split(",") if v)

        return cls(
            num_classes=int(header["num_classes"]),
            width=int(header["width"]),
            block_dilations=ints(header["block_dilations"]),
            aspp_rates=ints(header["aspp_rates"]),
            downsample=int(header["downsample"]),
            input_size=int(header["input_size"]),
            in_channels=int(header["in_channels"]),
        )


@dataclass
class SegModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError(
                f"parameter names differ: expected {sorted(self.params)}, got {sorted(state)}"
            )
        for name, value in state.items():
            if value.shape != self.params[name].shape:
                raise ValueError(
                    f"parameter {name}: shape {value.shape} != expected {self.params[name].shape}"
                )
            self.params[name] = Tensor(value.copy(), requires_grad=True)

    def checksum(self) -> str:
        return T.parameters_checksum(p.data for p in self.params.values())

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def validate_config(cfg: ModelConfig) -> None:
    if cfg.num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {cfg.num_classes}")
    if not cfg.aspp_rates:
        raise ValueError("aspp_rates must be nonempty")
    if len(set(cfg.aspp_rates)) != len(cfg.aspp_rates):
        raise ValueError(f"aspp_rates must be distinct, got {cfg.aspp_rates}")
    if any(r < 1 for r in cfg.aspp_rates) or any(d < 1 for d in cfg.block_dilations):
        raise ValueError(f"dilation rates must be >= 1: {cfg.aspp_rates}, {cfg.block_dilations}")
    if cfg.downsample not in (1, 2):
        raise ValueError(f"downsample must be 1 or 2, got {cfg.downsample}")
    if cfg.input_size % cfg.downsample:
        raise ValueError(
            f"input_size {cfg.input_size} is not divisible by downsample factor {cfg.downsample}"
        )
    half = cfg.input_size // cfg.downsample // 2
    for r in (*cfg.block_dilations, *cfg.aspp_rates):
        if r > half:
            raise ValueError(
                f"dilation rate {r} exceeds half the feature-map width ({half}) "
                f"for input_size {cfg.input_size}"
            )


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build(cfg: ModelConfig, seed: int) -> SegModel:
    """Create a model with seeded fan-in-scaled uniform initialisation."""
    validate_config(cfg)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    cin = cfg.in_channels
    for i, _ in enumerate(cfg.block_dilations):
        fan_in = cin * 9
        params[f"block{i}.weight"] = Tensor(
            _uniform(rng, (cfg.width, cin, 3, 3), fan_in, np.sqrt(2.0)), requires_grad=True
        )
        params[f"block{i}.bias"] = Tensor(
            _uniform(rng, (cfg.width,), fan_in, 1.0), requires_grad=True
        )
        cin = cfg.width
    for r in cfg.aspp_rates:
        params[f"aspp{r}.weight"] = Tensor(
            _uniform(rng, (cfg.num_classes, cin, 3, 3), cin * 9, 1.0), requires_grad=True
        )
        params[f"aspp{r}.bias"] = Tensor(
            _uniform(rng, (cfg.num_classes,), cin * 9, 1.0), requires_grad=True
        )
    return SegModel(cfg, params)


def forward(model: SegModel, x) -> Tensor:
    """Logits B×C×H×W for a B×3×H×W batch."""
    cfg = model.config
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise T.ShapeError(
            f"forward: expected input B×{cfg.in_channels}×H×W, got {x.shape}"
        )
    h, w = x.shape[2:]
    if h % cfg.downsample or w % cfg.downsample:
        raise T.ShapeError(
            f"forward: spatial size {h}x{w} not divisible by downsample factor {cfg.downsample}"
        )
    p = model.params
    feat = x
    for i, d in enumerate(cfg.block_dilations):
        feat = T.relu(T.conv2d(feat, p[f"block{i}.weight"], p[f"block{i}.bias"], dilation=d))
        if i == 0 and cfg.downsample == 2:
            feat = T.avg_pool2(feat)
    logits = None
    for r in cfg.aspp_rates:
        branch = T.conv2d(feat, p[f"aspp{r}.weight"], p[f"aspp{r}.bias"], dilation=r)
        logits = branch if logits is None else T.add(logits, branch)
    if cfg.downsample == 2:
        logits = T.upsample2(logits)
    return logits


def predict(model: SegModel, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Argmax class map for an N×3×H×W array, without building a graph."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            logits = forward(model, images[i : i + batch])
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out, axis=0)


def save(model: SegModel, path) -> None:
    T.save_checkpoint(path, model.state_dict(), model.config.header())


def load(path, expected: ModelConfig | None = None) -> SegModel:
    """Load a checkpoint, checking its architecture against ``expected`` if given."""
    header, state = T.load_checkpoint(path)
    cfg = ModelConfig.from_header(header)
    if expected is not None and cfg != expected:
        diffs = [
            f"{k}: checkpoint {header[k]} vs config {v}"
            for k, v in expected.header().items()
            if header.get(k) != v
        ]
        raise ValueError("architecture mismatch: " + "; ".join(diffs))
    model = build(cfg, seed=0)
    model.load_state_dict(state)
    return model
