"""Toy CycleGAN for clean <-> soiled translation and manifest augmentation.

Images travel through the networks as float32 NCHW tensors in [-1, 1].
Generators end in tanh; discriminators emit a patch score map and are
trained with the least-squares objective.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Category, DatasetManifest, FrameRecord, Split, category_of
from .errors import CheckpointError, ConfigError, NumericalError, ShapeError
from .geometry import SoilingClass
from .nn import functional as F
from .nn.checkpoint import read_tensors, write_tensors
from .nn.layers import Conv2d, Module, ResidualBlock, normalize_images
from .nn.optim import Adam
from .nn.tensor import Tensor
from .ppm import read_ppm, write_ppm

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "d_loss_A", "d_loss_B", "g_loss_AB", "g_loss_BA", "cycle_loss")


@dataclass(frozen=True)
class GeneratorConfig:
    channels: int = 3
    base: int = 16
    n_down: int = 2
    n_res: int = 2


class Generator(Module):
    """Encoder-decoder: stem, strided downsampling, residual blocks,
    nearest upsampling + conv, tanh output."""

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig(), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c = cfg.base
        self.stem = Conv2d(cfg.channels, c, 3, 1, 1, rng)
        down = []
        for _ in range(cfg.n_down):
            down.append(Conv2d(c, 2 * c, 3, 2, 1, rng))
            c *= 2
        self.down = down
        self.res = [ResidualBlock(c, c, 1, rng) for _ in range(cfg.n_res)]
        up = []
        for _ in range(cfg.n_down):
            up.append(Conv2d(c, c // 2, 3, 1, 1, rng))
            c //= 2
        self.up = up
        self.out = Conv2d(c, cfg.channels, 3, 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        f = 2 ** self.cfg.n_down
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"generator input {x.shape[2]}x{x.shape[3]} not divisible by {f}")
        h = F.relu(self.stem(x))
        for conv in self.down:
            h = F.relu(conv(h))
        for block in self.res:
            h = block(h)
        for conv in self.up:
            h = F.relu(conv(F.upsample2x(h)))
        return F.tanh(self.out(h))


class LinearProbe(Module):
    """A single 1x1 convolution without activation; ``identity()`` builds
    one that returns its input unchanged."""

    def __init__(self, channels: int = 3, rng=None):
        self.conv = Conv2d(channels, channels, 1, 1, 0, rng)

    @classmethod
    def identity(cls, channels: int = 3) -> "LinearProbe":
        probe = cls(channels)
        probe.conv.weight.data = np.eye(channels, dtype=np.float32).reshape(channels, channels, 1, 1)
        return probe

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


@dataclass(frozen=True)
class DiscriminatorConfig:
    channels: int = 3
    base: int = 16
    n_layers: int = 2


class Discriminator(Module):
    """PatchGAN-style: strided 3x3 convs with leaky ReLU, then a 1-channel score map."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig(), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        layers = []
        c_in, c = cfg.channels, cfg.base
        for _ in range(cfg.n_layers):
            layers.append(Conv2d(c_in, c, 3, 2, 1, rng))
            c_in, c = c, 2 * c
        self.layers = layers
        self.score = Conv2d(c_in, 1, 3, 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.layers:
            h = F.leaky_relu(conv(h), 0.2)
        return self.score(h)


def cycle_loss(g_ab, g_ba, a: Tensor, b: Tensor) -> Tensor:
    """L1(G_BA(G_AB(a)), a) + L1(G_AB(G_BA(b)), b), each a mean over pixels."""
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"domain batches differ in shape: {a.shape} vs {b.shape}")
    return F.l1_loss(g_ba(g_ab(a)), a) + F.l1_loss(g_ab(g_ba(b)), b)


def lsgan_d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    return (F.mse_to(d_real, 1.0) + F.mse_to(d_fake, 0.0)) * 0.5


def lsgan_g_loss(d_fake: Tensor) -> Tensor:
    return F.mse_to(d_fake, 1.0)


def adversarial_loss(disc, fake: Tensor, real: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares (d_loss, g_loss). d_loss does not propagate into ``fake``."""
    if fake.shape != real.shape:
        raise ShapeError(f"fake {fake.shape} and real {real.shape} batches differ")
    d_loss = lsgan_d_loss(disc(real), disc(fake.detach()))
    g_loss = lsgan_g_loss(disc(fake))
    return d_loss, g_loss


@dataclass
class CycleGANConfig:
    lr: float = 0.0002
    beta1: float = 0.5
    cycle_weight: float = 10.0
    batch_size: int = 8
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)


@dataclass
class CycleGANResult:
    g_ab: Generator
    g_ba: Generator
    d_a: Discriminator
    d_b: Discriminator
    history: list[dict]


def _snapshot(nets):
    return [n.state_dict() for n in nets]


def train_cyclegan(domain_a: np.ndarray, domain_b: np.ndarray, epochs: int, seed: int = 0,
                   cfg: CycleGANConfig | None = None,
                   divergence_dir: str | os.PathLike | None = None) -> CycleGANResult:
    """Unpaired training on uint8 NCHW image stacks; A is clean, B is soiled.

    Each epoch visits ``max(len(A), len(B)) // batch_size`` iterations, drawing
    the two domains from independent seeded permutations. On a non-finite loss
    the last completed epoch's generators are written to ``divergence_dir``
    (when given) and :class:`NumericalError` is raised.
    """
    cfg = cfg or CycleGANConfig()
    if len(domain_a) == 0 or len(domain_b) == 0:
        raise ConfigError("both CycleGAN domains need at least one image")
    if domain_a.shape[1:] != domain_b.shape[1:]:
        raise ShapeError(f"domain image shapes differ: {domain_a.shape[1:]} vs {domain_b.shape[1:]}")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    ss = np.random.SeedSequence(seed)
    init_a, init_b, init_da, init_db, data_seed = ss.spawn(5)
    g_ab = Generator(cfg.generator, np.random.default_rng(init_a))
    g_ba = Generator(cfg.generator, np.random.default_rng(init_b))
    d_a = Discriminator(cfg.discriminator, np.random.default_rng(init_da))
    d_b = Discriminator(cfg.discriminator, np.random.default_rng(init_db))
    gen_params = [(f"g_ab.{k}", p) for k, p in g_ab.named_parameters()] + \
                 [(f"g_ba.{k}", p) for k, p in g_ba.named_parameters()]
    disc_params = [(f"d_a.{k}", p) for k, p in d_a.named_parameters()] + \
                  [(f"d_b.{k}", p) for k, p in d_b.named_parameters()]
    opt_g = Adam(gen_params, lr=cfg.lr, beta1=cfg.beta1)
    opt_d = Adam(disc_params, lr=cfg.lr, beta1=cfg.beta1)
    rng = np.random.default_rng(data_seed)
    xa = normalize_images(domain_a)
    xb = normalize_images(domain_b)
    bs = min(cfg.batch_size, len(xa), len(xb))
    iters = max(1, max(len(xa), len(xb)) // bs)
    history = []
    last_good = _snapshot((g_ab, g_ba))
    for epoch in range(1, epochs + 1):
        pa, pb = np.empty(0, np.int64), np.empty(0, np.int64)
        sums = dict.fromkeys(HISTORY_COLUMNS[1:], 0.0)
        try:
            for _ in range(iters):
                if pa.size < bs:
                    pa = np.concatenate([pa, rng.permutation(len(xa))])
                if pb.size < bs:
                    pb = np.concatenate([pb, rng.permutation(len(xb))])
                a = Tensor(xa[pa[:bs]])
                b = Tensor(xb[pb[:bs]])
                pa, pb = pa[bs:], pb[bs:]

                fake_b = g_ab(a)
                fake_a = g_ba(b)
                cyc = F.l1_loss(g_ba(fake_b), a) + F.l1_loss(g_ab(fake_a), b)
                g_loss_ab = lsgan_g_loss(d_b(fake_b))
                g_loss_ba = lsgan_g_loss(d_a(fake_a))
                total_g = g_loss_ab + g_loss_ba + cyc * cfg.cycle_weight
                opt_g.zero_grad()
                total_g.backward()
                opt_g.step()

                d_loss_a = lsgan_d_loss(d_a(a), d_a(fake_a.detach()))
                d_loss_b = lsgan_d_loss(d_b(b), d_b(fake_b.detach()))
                opt_d.zero_grad()
                (d_loss_a + d_loss_b).backward()
                opt_d.step()

                for key, val in (("d_loss_A", d_loss_a), ("d_loss_B", d_loss_b),
                                 ("g_loss_AB", g_loss_ab), ("g_loss_BA", g_loss_ba),
                                 ("cycle_loss", cyc)):
                    sums[key] += val.item()
        except NumericalError as exc:
            if divergence_dir is not None:
                save_generators(divergence_dir, g_ab, g_ba, states=last_good)
            raise NumericalError(f"CycleGAN diverged in epoch {epoch}: {exc}") from exc
        entry = {"epoch": epoch}
        entry.update({k: v / iters for k, v in sums.items()})
        history.append(entry)
        last_good = _snapshot((g_ab, g_ba))
        log.debug("cyclegan epoch %d: %s", epoch, entry)
    return CycleGANResult(g_ab, g_ba, d_a, d_b, history)


def _generator_digest(cfg: GeneratorConfig) -> bytes:
    blob = json.dumps({"generator": asdict(cfg)}, sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


def save_generators(out_dir, g_ab: Generator, g_ba: Generator, states=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sa, sb = states if states is not None else (g_ab.state_dict(), g_ba.state_dict())
    write_tensors(out / "G_AB.ckpt", _generator_digest(g_ab.cfg), sa)
    write_tensors(out / "G_BA.ckpt", _generator_digest(g_ba.cfg), sb)


def load_generator(path, cfg: GeneratorConfig = GeneratorConfig()) -> Generator:
    _, digest, tensors = read_tensors(path)
    if digest != _generator_digest(cfg):
        raise CheckpointError(f"{path}: generator checkpoint does not match the configured generator")
    g = Generator(cfg)
    g.load_state_dict(tensors)
    return g


def write_loss_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def read_loss_history(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != HISTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_COLUMNS[1:]}}
                for r in reader]


def random_crops(images: np.ndarray, size: int, count: int, seed: int = 0) -> np.ndarray:
    """``count`` seeded size x size crops from a uint8 NCHW stack."""
    n, _, h, w = images.shape
    if n == 0:
        raise ConfigError("no images to crop from")
    if size > h or size > w:
        raise ConfigError(f"crop size {size} exceeds image size {w}x{h}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, count)
    ys = rng.integers(0, h - size + 1, count)
    xs = rng.integers(0, w - size + 1, count)
    return np.stack([images[i, :, y:y + size, x:x + size] for i, y, x in zip(idx, ys, xs)])


def domain_images(manifest: DatasetManifest, root, size: int, count: int, seed: int = 0,
                  split: Split | None = Split.TRAIN) -> tuple[np.ndarray, np.ndarray]:
    """Crops for the two CycleGAN domains: clean frames (A) and opaque-soiled ones (B).

    Soiled crops are centred on a random opaque polygon so that every B sample
    actually shows soiling.
    """
    root = Path(root)
    recs = manifest.select(split) if split is not None and manifest.split_assignment \
        else list(manifest.records)
    clean = [r for r in recs if not r.augmented and category_of(r) == Category.CLEAN]
    soiled = [r for r in recs if not r.augmented
              and any(p.soiling_class == SoilingClass.OPAQUE for p in r.polygons)]
    if not clean or not soiled:
        raise ConfigError("CycleGAN needs both clean and opaque-soiled training frames")
    rng = np.random.default_rng(seed)
    a = random_crops(np.stack([read_ppm(root / r.image_path).transpose(2, 0, 1) for r in clean]),
                     size, count, int(rng.integers(2**31)))
    b = []
    for i in rng.integers(0, len(soiled), count):
        r = soiled[i]
        img = read_ppm(root / r.image_path).transpose(2, 0, 1)
        polys = [p for p in r.polygons if p.soiling_class == SoilingClass.OPAQUE]
        x0, y0, x1, y1 = polys[rng.integers(len(polys))].bbox
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        x = int(np.clip(round(cx - size / 2), 0, r.width - size))
        y = int(np.clip(round(cy - size / 2), 0, r.height - size))
        b.append(img[:, y:y + size, x:x + size])
    return a, np.stack(b)


def translate(gen, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Run a generator over uint8 NCHW images and return uint8 NCHW images."""
    out = []
    for start in range(0, len(images), batch_size):
        y = gen(Tensor(normalize_images(images[start:start + batch_size]))).data
        out.append(np.clip(np.rint((y + 1.0) * 127.5), 0, 255).astype(np.uint8))
    return np.concatenate(out) if out else np.empty((0,) + images.shape[1:], np.uint8)


def augment_manifest(manifest: DatasetManifest, g_ab, fraction: float, root, seed: int = 0,
                     label: tuple[int, int] = (1, 0), subdir: str = "augmented") -> DatasetManifest:
    """Append generator-soiled copies of a seeded sample of clean frames.

    Only non-augmented clean frames are eligible; when the manifest has a
    split assignment only training frames are, so generated images never
    resemble evaluation frames. New records have no polygons, carry
    ``label`` as their image-level label, are flagged augmented and are
    assigned to the training split.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"augmentation fraction must be in [0, 1], got {fraction}")
    root = Path(root)
    has_split = bool(manifest.split_assignment)
    pool = [r for r in manifest.records
            if not r.augmented and category_of(r) == Category.CLEAN
            and (not has_split or manifest.split_assignment.get(r.frame_id) == Split.TRAIN)]
    k = int(round(fraction * len(pool)))
    if k == 0:
        return DatasetManifest(list(manifest.records), dict(manifest.split_assignment),
                               manifest.split_seed)
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(pool), size=k, replace=False))
    (root / subdir).mkdir(parents=True, exist_ok=True)
    records = list(manifest.records)
    assignment = dict(manifest.split_assignment)
    existing = {r.frame_id for r in records}
    for i in chosen:
        src = pool[i]
        img = read_ppm(root / src.image_path).transpose(2, 0, 1)[None]
        fake = translate(g_ab, img)[0].transpose(1, 2, 0)
        fid = f"{src.frame_id}-gan"
        if fid in existing:
            raise ConfigError(f"augmented frame id {fid!r} already exists")
        rel = f"{subdir}/{fid}.ppm"
        write_ppm(root / rel, fake)
        records.append(FrameRecord(fid, src.camera, src.width, src.height, (), rel,
                                   augmented=True, label=tuple(label)))
        assignment[fid] = Split.TRAIN
    return DatasetManifest(records, assignment if has_split else {}, manifest.split_seed)
