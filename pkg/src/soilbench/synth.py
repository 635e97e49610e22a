"""Procedural road scenes with opaque and transparent soiling overlays.

Everything is a pure function of integer seeds. Frame ``i`` of a dataset draws
from its own stream ``SeedSequence([seed, i])``, so frames can be rendered in
any order or in parallel without changing a byte of output.

Images are (H, W, 3) uint8 arrays. Camera styles differ in palette and in
the amplitude of the fine texture; side cameras are smoother and warmer than
front/rear ones.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Camera, Category, DatasetManifest, FrameRecord, save_manifest
from .errors import ConfigError
from .geometry import Polygon, SoilingClass, is_simple, points_in_region
from .ppm import write_pgm, write_ppm

SEG_SKY, SEG_GROUND, SEG_ROAD, SEG_OBJECT = 0, 1, 2, 3
SEG_CLASSES = 4
MIN_DIM = 16

# dark browns; scene palettes and object colours are kept well away from these
MUD_COLORS = np.array([[62, 44, 26], [76, 54, 32], [50, 40, 30], [86, 64, 40], [40, 34, 28]])


@dataclass(frozen=True)
class CameraStyle:
    sky_top: tuple[int, int, int]
    sky_bottom: tuple[int, int, int]
    ground: tuple[int, int, int]
    road: tuple[int, int, int]
    texture: int        # half-amplitude of the per-pixel uniform noise
    horizon: tuple[float, float]


STYLES = {
    Camera.FRONT: CameraStyle((70, 120, 200), (170, 200, 230), (80, 120, 60), (95, 95, 100),
                              16, (0.35, 0.5)),
    Camera.REAR: CameraStyle((80, 125, 195), (180, 205, 225), (90, 115, 70), (105, 100, 100),
                             16, (0.35, 0.5)),
    Camera.LEFT: CameraStyle((150, 140, 130), (200, 180, 150), (185, 165, 130), (150, 140, 130),
                             12, (0.2, 0.35)),
    Camera.RIGHT: CameraStyle((140, 135, 135), (205, 185, 160), (195, 170, 135), (155, 145, 135),
                              12, (0.2, 0.35)),
}


@dataclass
class Scene:
    image: np.ndarray                 # (H, W, 3) uint8
    seg: np.ndarray                   # (H, W) uint8 class ids
    boxes: list[tuple[int, int, int, int]]


def _pixel_centers(width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs + 0.5, ys + 0.5], axis=-1)


def _object_color(rng: np.random.Generator) -> np.ndarray:
    """Bright saturated colour: one strong channel, one weak, one anywhere."""
    levels = np.array([rng.integers(170, 246), rng.integers(10, 70), rng.integers(10, 246)])
    return levels[rng.permutation(3)]


def render_scene(seed: int, width: int, height: int, camera: Camera = Camera.FRONT) -> Scene:
    """Clean scene with its segmentation map and object boxes."""
    if width < MIN_DIM or height < MIN_DIM:
        raise ConfigError(f"scenes need at least {MIN_DIM}x{MIN_DIM} pixels, got {width}x{height}")
    style = STYLES[Camera(camera)]
    rng = np.random.default_rng(seed)
    jitter = rng.integers(-15, 16, size=(4, 3))
    sky_top = np.clip(np.array(style.sky_top) + jitter[0], 0, 255)
    sky_bot = np.clip(np.array(style.sky_bottom) + jitter[1], 0, 255)
    ground = np.clip(np.array(style.ground) + jitter[2], 0, 255)
    road = np.clip(np.array(style.road) + jitter[3], 0, 255)

    hy = int(round(height * rng.uniform(*style.horizon)))
    img = np.empty((height, width, 3), dtype=np.float64)
    seg = np.empty((height, width), dtype=np.uint8)
    t = np.linspace(0.0, 1.0, max(hy, 1))[:, None]
    img[:hy] = (sky_top * (1 - t) + sky_bot * t)[:, None, :]
    seg[:hy] = SEG_SKY
    img[hy:] = ground
    seg[hy:] = SEG_GROUND

    # road: trapezoid from a vanishing point on the horizon to the bottom edge
    vx = width * rng.uniform(0.4, 0.6)
    half_top = width * 0.04
    left, right = width * rng.uniform(0.0, 0.15), width * rng.uniform(0.85, 1.0)
    centers = _pixel_centers(width, height)
    px, py = centers[..., 0], centers[..., 1]
    frac = np.clip((py - hy) / max(height - hy, 1), 0.0, 1.0)
    lo = (vx - half_top) + (left - (vx - half_top)) * frac
    hi = (vx + half_top) + (right - (vx + half_top)) * frac
    on_road = (py >= hy) & (px >= lo) & (px <= hi)
    img[on_road] = road
    seg[on_road] = SEG_ROAD

    boxes = []
    for _ in range(rng.integers(1, 4)):
        bw = max(2, int(width * rng.uniform(0.08, 0.2)))
        bh = max(2, int(height * rng.uniform(0.12, 0.3)))
        x0 = int(rng.integers(0, width - bw + 1))
        y1 = int(rng.integers(min(hy + bh // 2, height), height + 1))
        y0 = max(0, y1 - bh)
        if y1 - y0 < 2:
            continue
        color = _object_color(rng)
        img[y0:y1, x0:x0 + bw] = color
        seg[y0:y1, x0:x0 + bw] = SEG_OBJECT
        boxes.append((x0, y0, x0 + bw, y1))

    noise = rng.integers(-style.texture, style.texture + 1, size=img.shape)
    out = np.clip(np.rint(img) + noise, 0, 255).astype(np.uint8)
    return Scene(out, seg, boxes)


def generate_clean_scene(seed: int, width: int, height: int,
                         camera: Camera = Camera.FRONT) -> np.ndarray:
    return render_scene(seed, width, height, camera).image


# -- soiling -------------------------------------------------------------------

@dataclass(frozen=True)
class BlobParams:
    """Blob count range (inclusive) and radius range as a fraction of min(w, h)."""

    count: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (0.08, 0.2)

    def validate(self, what: str) -> None:
        lo, hi = self.count
        if lo < 0 or hi < lo:
            raise ConfigError(f"{what} blob count range {self.count} is invalid")
        rlo, rhi = self.radius
        if not 0 < rlo <= rhi <= 0.5:
            raise ConfigError(f"{what} blob radius range {self.radius} must lie in (0, 0.5]")


def random_blob(rng: np.random.Generator, width: int, height: int, radius: float,
                soiling_class: SoilingClass) -> Polygon:
    """Star-shaped blob: an ellipse with radially jittered vertices, fully inside the image."""
    for _ in range(100):
        n = int(rng.integers(8, 17))
        rx = min(radius * rng.uniform(0.8, 1.25), width / 2)
        ry = min(radius * rng.uniform(0.8, 1.25), height / 2)
        cx = rng.uniform(rx, width - rx)
        cy = rng.uniform(ry, height - ry)
        angles = (np.arange(n) + rng.uniform(-0.3, 0.3, n)) * (2 * np.pi / n)
        scale = rng.uniform(0.75, 1.0, n)
        pts = np.stack([cx + rx * scale * np.cos(angles), cy + ry * scale * np.sin(angles)], 1)
        pts = np.round(pts, 2)
        pts[:, 0] = np.clip(pts[:, 0], 0, width)
        pts[:, 1] = np.clip(pts[:, 1], 0, height)
        if is_simple(pts):
            return Polygon(pts, soiling_class)
    raise RuntimeError("could not draw a simple blob")  # pragma: no cover


def _place_blobs(rng, width, height, params: BlobParams, soiling_class, taken: list) -> list:
    """Draw non-overlapping blobs; ``taken`` holds bounding boxes already in use."""
    lo, hi = params.count
    n = int(rng.integers(lo, hi + 1))
    dim = min(width, height)
    polys = []
    for k in range(n):
        # the first ``lo`` blobs are mandatory, so they get a far larger budget
        for _attempt in range(1000 if k < lo else 50):
            r = dim * rng.uniform(*params.radius)
            poly = random_blob(rng, width, height, r, soiling_class)
            x0, y0, x1, y1 = poly.bbox
            if all(x1 < a0 or x0 > a1 or y1 < b0 or y0 > b1 for a0, b0, a1, b1 in taken):
                taken.append(poly.bbox)
                polys.append(poly)
                break
        else:
            if k < lo:
                raise ConfigError(f"could not place {lo} non-overlapping {soiling_class.token} "
                                  f"blobs; reduce blob count or radius")
    return polys


def region_mask(polygons: Sequence[Polygon], width: int, height: int) -> np.ndarray:
    """Pixels whose centre lies inside the polygon union."""
    return points_in_region(_pixel_centers(width, height), polygons)


def apply_opaque_soiling(img: np.ndarray, seed: int, params: BlobParams = BlobParams(),
                         taken: list | None = None) -> tuple[np.ndarray, list[Polygon]]:
    """Paint mud-coloured blobs; painted pixels do not depend on the input."""
    params.validate("opaque")
    h, w, _ = img.shape
    rng = np.random.default_rng(seed)
    polys = _place_blobs(rng, w, h, params, SoilingClass.OPAQUE, [] if taken is None else taken)
    out = img.copy()
    for poly in polys:
        mask = region_mask([poly], w, h)
        base = MUD_COLORS[rng.integers(len(MUD_COLORS))] + rng.integers(-10, 11, 3)
        speckle = rng.integers(-4, 5, size=(int(mask.sum()), 3))
        out[mask] = np.clip(base + speckle, 0, 255).astype(np.uint8)
    return out, polys


def box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Integer box blur with edge replication; exact on constant images."""
    if radius < 1:
        raise ConfigError(f"blur radius must be >= 1, got {radius}")
    k = 2 * radius + 1
    pad = np.pad(img.astype(np.int64), ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    c = np.cumsum(np.cumsum(pad, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0), (0, 0)))
    h, w = img.shape[:2]
    s = c[k:k + h, k:k + w] - c[:h, k:k + w] - c[k:k + h, :w] + c[:h, :w]
    n = k * k
    return ((s + n // 2) // n).astype(np.uint8)


def apply_transparent_soiling(img: np.ndarray, seed: int, params: BlobParams = BlobParams(),
                              blur_radius: int = 3, desaturation: float = 0.5,
                              taken: list | None = None) -> tuple[np.ndarray, list[Polygon]]:
    """Blur and partially desaturate the scene inside seeded blobs.

    Desaturation blends each blurred pixel towards its channel mean by
    ``desaturation``; grey pixels are left as they are.
    """
    params.validate("transparent")
    if blur_radius < 1:
        raise ConfigError(f"blur radius must be >= 1, got {blur_radius}")
    if not 0.0 <= desaturation <= 1.0:
        raise ConfigError(f"desaturation must be in [0, 1], got {desaturation}")
    h, w, _ = img.shape
    rng = np.random.default_rng(seed)
    polys = _place_blobs(rng, w, h, params, SoilingClass.TRANSPARENT,
                         [] if taken is None else taken)
    out = img.copy()
    if polys:
        mask = region_mask(polys, w, h)
        blurred = box_blur(img, blur_radius)[mask].astype(np.int64)
        if desaturation > 0:
            gray = blurred.sum(axis=1, keepdims=True)
            # integer arithmetic: (1 - d) * c + d * mean, d in 1/256 steps
            d = int(round(desaturation * 256))
            blurred = ((256 - d) * 3 * blurred + d * gray + 384) // 768
        out[mask] = np.clip(blurred, 0, 255).astype(np.uint8)
    return out, polys


# -- datasets ----------------------------------------------------------------

@dataclass
class SynthConfig:
    seed: int = 0
    width: int = 128
    height: int = 80
    n_frames: int = 32
    category_quotas: dict = field(default_factory=lambda: {
        Category.CLEAN: 8, Category.OPAQUE: 8, Category.TRANSPARENT: 8, Category.BOTH: 8})
    opaque: BlobParams = field(default_factory=BlobParams)
    transparent: BlobParams = field(default_factory=lambda: BlobParams((1, 2), (0.15, 0.3)))
    blur_radius: int = 3
    desaturation: float = 0.5
    cameras: tuple = tuple(Camera)
    prefix: str = "f"

    def __post_init__(self):
        self.category_quotas = {Category[c.upper()] if isinstance(c, str) else Category(c): int(n)
                                for c, n in self.category_quotas.items()}
        self.cameras = tuple(Camera(c) for c in self.cameras)

    def validate(self) -> "SynthConfig":
        if self.width < MIN_DIM or self.height < MIN_DIM:
            raise ConfigError(f"frames need at least {MIN_DIM}x{MIN_DIM} pixels")
        if any(n < 0 for n in self.category_quotas.values()):
            raise ConfigError("category quotas must be non-negative")
        if sum(self.category_quotas.values()) != self.n_frames:
            raise ConfigError(f"category quotas sum to {sum(self.category_quotas.values())}, "
                              f"but n_frames is {self.n_frames}")
        if self.blur_radius < 1:
            raise ConfigError(f"blur radius must be >= 1, got {self.blur_radius}")
        if not self.cameras:
            raise ConfigError("at least one camera is required")
        for name, p in (("opaque", self.opaque), ("transparent", self.transparent)):
            p.validate(name)
            if p.count[0] < 1:
                raise ConfigError(f"{name} blob count must start at 1 so soiled frames are soiled")
        return self


def frame_categories(cfg: SynthConfig) -> list[Category]:
    """Category of every frame index: quotas laid out, then shuffled by the seed."""
    cats = [c for c in Category for _ in range(cfg.category_quotas.get(c, 0))]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    return [cats[i] for i in rng.permutation(len(cats))]


@dataclass
class SynthFrame:
    record: FrameRecord
    image: np.ndarray
    seg: np.ndarray


def render_frame(cfg: SynthConfig, index: int, category: Category) -> SynthFrame:
    ss = np.random.SeedSequence([cfg.seed, index])
    scene_seed, opaque_seed, transparent_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    camera = cfg.cameras[index % len(cfg.cameras)]
    scene = render_scene(scene_seed, cfg.width, cfg.height, camera)
    img = scene.image
    polys: list[Polygon] = []
    taken: list = []
    if category in (Category.TRANSPARENT, Category.BOTH):
        img, p = apply_transparent_soiling(img, transparent_seed, cfg.transparent,
                                           cfg.blur_radius, cfg.desaturation, taken)
        polys += p
    if category in (Category.OPAQUE, Category.BOTH):
        img, p = apply_opaque_soiling(img, opaque_seed, cfg.opaque, taken)
        polys += p
    fid = f"{cfg.prefix}{index:05d}"
    record = FrameRecord(fid, camera, cfg.width, cfg.height, tuple(polys),
                         f"frames/{fid}.ppm", seg_path=f"frames/{fid}.seg.pgm",
                         objects=tuple(tuple(float(v) for v in b) for b in scene.boxes))
    return SynthFrame(record, img, scene.seg)


def build_synthetic_dataset(cfg: SynthConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    """Render all frames into ``out_dir/frames`` and write ``out_dir/manifest.jsonl``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    cats = frame_categories(cfg)
    if cats:
        (out / "frames").mkdir(exist_ok=True)
    for i, cat in enumerate(cats):
        frame = render_frame(cfg, i, cat)
        write_ppm(out / frame.record.image_path, frame.image)
        write_pgm(out / frame.record.seg_path, frame.seg)
        records.append(frame.record)
    manifest = DatasetManifest(records)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest
