"""Parameterised modules: conv layers, residual blocks, the encoder and task heads."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from . import functional as F
from .tensor import DTYPE, Parameter, Tensor


class Module:
    """Base class; parameters are discovered from attributes in definition order."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ShapeError(f"state dict mismatch; missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel=3, stride=1, padding=0,
                 rng: np.random.Generator | None = None, bias: bool = True):
        kh, kw = F._pair(kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kh * kw
        bound = math.sqrt(6.0 / fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_ch, in_ch, kh, kw)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride = F._pair(stride)
        self.padding = F._pair(padding)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weight.shape[2:]
        return (F.conv_output_size(h, kh, self.stride[0], self.padding[0]),
                F.conv_output_size(w, kw, self.stride[1], self.padding[1]))


class ResidualBlock(Module):
    """y = relu(conv(relu(conv(x))) + shortcut(x)); the shortcut is a 1x1
    projection when the stride or width changes and the identity otherwise."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, rng)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng)
        self.proj = Conv2d(in_ch, out_ch, 1, stride, 0, rng) \
            if (stride != 1 or in_ch != out_ch) else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(F.relu(self.conv1(x)))
        return F.relu(h + self.shortcut(x))

    def shortcut(self, x: Tensor) -> Tensor:
        return x if self.proj is None else self.proj(x)


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    input_height: int = 80
    input_width: int = 128
    stem_channels: int = 8
    stem_stride: int = 2
    widths: tuple[int, ...] = (8, 16, 24, 32)
    strides: tuple[int, ...] = (1, 2, 2, 1)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.widths) != len(self.strides):
            raise ConfigError("encoder widths and strides must have equal length")
        if any(s < 1 for s in self.strides) or self.stem_stride < 1:
            raise ConfigError("encoder strides must be >= 1")
        f = self.downsample
        if self.input_height % f or self.input_width % f:
            raise ConfigError(f"input {self.input_width}x{self.input_height} is not divisible "
                              f"by the encoder downsampling factor {f}")

    @property
    def downsample(self) -> int:
        return self.stem_stride * math.prod(self.strides)

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.input_height // self.downsample, self.input_width // self.downsample

    @property
    def out_channels(self) -> int:
        return self.widths[-1] if self.widths else self.stem_channels


class Encoder(Module):
    """ResNet10-style encoder: a strided 3x3 stem and one residual block per stage."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stem = Conv2d(cfg.in_channels, cfg.stem_channels, 3, cfg.stem_stride, 1, rng)
        blocks = []
        prev = cfg.stem_channels
        for width, stride in zip(cfg.widths, cfg.strides):
            blocks.append(ResidualBlock(prev, width, stride, rng))
            prev = width
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        c = self.cfg
        if x.shape[1:] != (c.in_channels, c.input_height, c.input_width):
            raise ShapeError(f"encoder expects (N, {c.in_channels}, {c.input_height}, "
                             f"{c.input_width}) input, got {x.shape}")
        h = F.relu(self.stem(x))
        for block in self.blocks:
            h = block(h)
        return h


TILE, IMAGE, SEG, DET = "tile", "image", "seg", "det"
HEAD_NAMES = (TILE, IMAGE, SEG, DET)


class SoilingHead(Module):
    """Two convolutions then softsign mapped to (0, 1).

    In tile mode both convolutions keep the feature resolution, giving one
    [opaque, transparent] probability pair per grid cell. In image mode the
    first convolution is strided and the second one spans whatever is left,
    collapsing the map to a single cell.
    """

    def __init__(self, in_ch: int, feature_hw: tuple[int, int], mode: str = TILE,
                 hidden: int = 32, image_stride: int = 2, rng=None):
        if mode not in (TILE, IMAGE):
            raise ConfigError(f"soiling head mode must be tile or image, got {mode!r}")
        self.mode = mode
        if mode == TILE:
            self.conv1 = Conv2d(in_ch, hidden, 3, 1, 1, rng)
            self.conv2 = Conv2d(hidden, 2, 3, 1, 1, rng)
            self.grid = feature_hw
        else:
            self.conv1 = Conv2d(in_ch, hidden, 3, image_stride, 1, rng)
            h1, w1 = self.conv1.output_hw(*feature_hw)
            self.conv2 = Conv2d(hidden, 2, (h1, w1), (h1, w1), 0, rng)
            self.grid = (1, 1)

    def forward(self, features: Tensor) -> Tensor:
        return F.softsign_probability(self.conv2(F.relu(self.conv1(features))))


class SegHead(Module):
    """FCN-style decoder: class scores at feature resolution, then repeated
    2x nearest upsampling with a 3x3 refinement conv up to input resolution."""

    def __init__(self, in_ch: int, downsample: int, num_classes: int = 4, hidden: int = 16,
                 rng=None):
        n_up = int(round(math.log2(downsample)))
        if 2 ** n_up != downsample:
            raise ConfigError(f"segmentation head needs a power-of-two downsampling, got {downsample}")
        self.num_classes = num_classes
        self.conv = Conv2d(in_ch, hidden, 3, 1, 1, rng)
        self.score = Conv2d(hidden, num_classes, 1, 1, 0, rng)
        self.up = [Conv2d(num_classes, num_classes, 3, 1, 1, rng) for _ in range(n_up)]

    def forward(self, features: Tensor) -> Tensor:
        h = self.score(F.relu(self.conv(features)))
        for conv in self.up:
            h = conv(F.upsample2x(h))
        return h


class DetHead(Module):
    """One conv emitting, per grid cell, an objectness logit and four box terms."""

    def __init__(self, in_ch: int, rng=None):
        self.conv = Conv2d(in_ch, 5, 3, 1, 1, rng)

    def forward(self, features: Tensor) -> Tensor:
        return self.conv(features)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: tuple[str, ...] = (TILE,)
    soiling_hidden: int = 32
    image_stride: int = 2
    seg_classes: int = 4
    seg_hidden: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        bad = [h for h in self.heads if h not in HEAD_NAMES]
        if bad or not self.heads or len(set(self.heads)) != len(self.heads):
            raise ConfigError(f"heads must be distinct names from {HEAD_NAMES}, got {self.heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["widths"] = list(self.encoder.widths)
        d["encoder"]["strides"] = list(self.encoder.strides)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder"))
        return cls(encoder=enc, **d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()


class SoilingNet(Module):
    """Shared encoder with any subset of the tile, image, seg and det heads."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        enc = cfg.encoder
        self.encoder = Encoder(enc, rng)
        heads = {}
        for name in cfg.heads:
            if name in (TILE, IMAGE):
                heads[name] = SoilingHead(enc.out_channels, enc.feature_hw, name,
                                          cfg.soiling_hidden, cfg.image_stride, rng)
            elif name == SEG:
                heads[name] = SegHead(enc.out_channels, enc.downsample, cfg.seg_classes,
                                      cfg.seg_hidden, rng)
            else:
                heads[name] = DetHead(enc.out_channels, rng)
        self.heads = heads

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        features = self.encoder(x)
        return {name: head(features) for name, head in self.heads.items()}


def normalize_images(images: np.ndarray) -> np.ndarray:
    """uint8 NCHW images to float32 in [-1, 1]."""
    return (np.asarray(images, dtype=DTYPE) / 127.5 - 1.0).astype(DTYPE)
