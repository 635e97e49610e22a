"""Frame manifest, image-level labels, subsampling, stratified splits, statistics.

The manifest is stored as UTF-8 JSON lines. An optional first line
``{"manifest": {"version": 1, "split_seed": ...}}`` carries manifest-level
metadata; every other line is one frame record::

    {"frame_id": "f0001", "camera": "front", "width": 128, "height": 80,
     "image": "frames/f0001.ppm",
     "polygons": [{"class": "opaque", "points": [[x, y], ...]}, ...]}

Optional record fields: ``split`` ("train" | "val" | "test"), ``seg``
(relative path of a P5 label map), ``objects`` (list of [x0, y0, x1, y1]
boxes), ``augmented`` (bool) and ``label`` ([opaque, transparent], only
meaningful for augmented frames without polygons). Unknown fields are
rejected.
"""
from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ManifestError, ValidationError
from .geometry import (Polygon, SoilingClass, TileSpec, polygon_area, rasterize_to_grid,
                       threshold_grid, validate_polygon)
from .ppm import read_pgm, read_ppm

MANIFEST_VERSION = 1
DEFAULT_RATIOS = (0.6, 0.2, 0.2)


class Camera(enum.Enum):
    FRONT = "front"
    REAR = "rear"
    LEFT = "left"
    RIGHT = "right"

    @classmethod
    def parse(cls, token: str) -> "Camera":
        try:
            return cls(token)
        except ValueError:
            raise ValidationError(f"unknown camera {token!r}") from None


ALL_CAMERAS = tuple(Camera)


class Category(enum.IntEnum):
    """Four-way image category, ordered as the rows of the confusion tables."""

    CLEAN = 0
    TRANSPARENT = 1
    OPAQUE = 2
    BOTH = 3

    @classmethod
    def from_vector(cls, vec: Sequence[int]) -> "Category":
        opaque, transparent = (int(bool(v)) for v in vec)
        return _CATEGORY_OF[(opaque, transparent)]

    def vector(self) -> np.ndarray:
        return np.array(_VECTOR_OF[self], dtype=np.uint8)


_CATEGORY_OF = {(0, 0): Category.CLEAN, (0, 1): Category.TRANSPARENT,
                (1, 0): Category.OPAQUE, (1, 1): Category.BOTH}
_VECTOR_OF = {c: v for v, c in _CATEGORY_OF.items()}


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"

    @classmethod
    def parse(cls, token) -> "Split":
        if isinstance(token, Split):
            return token
        try:
            return cls(str(token).lower())
        except ValueError:
            raise ValueError(f"unknown split {token!r}") from None


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    camera: Camera
    width: int
    height: int
    polygons: tuple[Polygon, ...]
    image_path: str
    seg_path: str | None = None
    objects: tuple[tuple[float, float, float, float], ...] = ()
    augmented: bool = False
    label: tuple[int, int] | None = None

    def validate(self) -> "FrameRecord":
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"frame {self.frame_id!r} has non-positive dimensions")
        for poly in self.polygons:
            validate_polygon(poly, self.width, self.height, self.frame_id)
        for box in self.objects:
            x0, y0, x1, y1 = box
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise ValidationError(f"object box {box} in frame {self.frame_id!r} is invalid")
        if self.label is not None and any(v not in (0, 1) for v in self.label):
            raise ValidationError(f"label of frame {self.frame_id!r} must be binary")
        return self


@dataclass
class DatasetManifest:
    records: list[FrameRecord]
    split_assignment: dict[str, Split] = field(default_factory=dict)
    split_seed: int | None = None

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.frame_id in seen:
                raise ManifestError(f"duplicate frame_id {r.frame_id!r}")
            seen.add(r.frame_id)
        unknown = set(self.split_assignment) - seen
        if unknown:
            raise ManifestError(f"split assignment names unknown frames: {sorted(unknown)[:5]}")

    def __len__(self):
        return len(self.records)

    def select(self, split: Split | str | None = None,
               cameras: Iterable[Camera] | None = None) -> list[FrameRecord]:
        """Records in manifest order, filtered by split and camera set."""
        split = Split.parse(split) if split is not None else None
        cams = frozenset(cameras) if cameras is not None else None
        out = []
        for r in self.records:
            if split is not None and self.split_assignment.get(r.frame_id) != split:
                continue
            if cams is not None and r.camera not in cams:
                continue
            out.append(r)
        return out


def image_level_label(record: FrameRecord, min_area_frac: float = 0.0) -> np.ndarray:
    """[opaque, transparent] presence vector of a frame."""
    if record.label is not None and not record.polygons:
        return np.array(record.label, dtype=np.uint8)
    min_area = min_area_frac * record.width * record.height
    out = np.zeros(2, dtype=np.uint8)
    for poly in record.polygons:
        if polygon_area(poly.vertices) >= min_area:
            out[poly.soiling_class] = 1
    return out


def category_of(record: FrameRecord, min_area_frac: float = 0.0) -> Category:
    return Category.from_vector(image_level_label(record, min_area_frac))


def subsample_frames(frame_ids: Sequence, stride: int) -> list:
    """Keep every ``stride``-th frame starting at index 0."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return list(frame_ids[::stride])


def apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier slot."""
    quotas = [n * r for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    left = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


def _check_ratios(ratios):
    if len(ratios) != 3:
        raise ConfigError(f"expected three split ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {tuple(ratios)}")


def stratified_split(manifest: DatasetManifest, ratios: Sequence[float] = DEFAULT_RATIOS,
                     seed: int = 0, min_area_frac: float = 0.0) -> dict[str, Split]:
    """Assign every record to train/val/test, stratified by image category.

    Augmented records always go to train so that generated frames never leak
    into evaluation.
    """
    _check_ratios(ratios)
    if not manifest.records:
        raise ManifestError("cannot split an empty manifest")
    strata: dict[Category, list[str]] = {c: [] for c in Category}
    assignment: dict[str, Split] = {}
    for r in manifest.records:
        if r.augmented:
            assignment[r.frame_id] = Split.TRAIN
        else:
            strata[category_of(r, min_area_frac)].append(r.frame_id)
    for cat, ids in strata.items():
        if not ids:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(cat)]))
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for split, size in zip(Split, apportion(len(ids), ratios)):
            for fid in shuffled[start:start + size]:
                assignment[fid] = split
            start += size
    # manifest order keeps the dict deterministic and diff-friendly
    return {r.frame_id: assignment[r.frame_id] for r in manifest.records}


def apply_split(manifest: DatasetManifest, ratios=DEFAULT_RATIOS, seed: int = 0,
                min_area_frac: float = 0.0) -> DatasetManifest:
    return DatasetManifest(list(manifest.records),
                           stratified_split(manifest, ratios, seed, min_area_frac), seed)


def category_stats(manifest: DatasetManifest, split: Split | str | None,
                   min_area_frac: float = 0.0) -> dict[Category, int]:
    """Per-category frame counts of one split (``None`` or ``"all"`` for every record)."""
    if isinstance(split, str) and split.lower() == "all":
        split = None
    records = manifest.select(split)
    counts = {c: 0 for c in Category}
    for r in records:
        counts[category_of(r, min_area_frac)] += 1
    return counts


# -- serialization ---------------------------------------------------------

_REQUIRED = ("frame_id", "camera", "width", "height", "image", "polygons")
_OPTIONAL = ("split", "seg", "objects", "augmented", "label")


def record_to_json(record: FrameRecord, split: Split | None = None) -> dict:
    d = {
        "frame_id": record.frame_id,
        "camera": record.camera.value,
        "width": record.width,
        "height": record.height,
        "image": record.image_path,
        "polygons": [{"class": p.soiling_class.token, "points": p.vertices.tolist()}
                     for p in record.polygons],
    }
    if split is not None:
        d["split"] = split.value
    if record.seg_path is not None:
        d["seg"] = record.seg_path
    if record.objects:
        d["objects"] = [list(b) for b in record.objects]
    if record.augmented:
        d["augmented"] = True
    if record.label is not None:
        d["label"] = list(record.label)
    return d


def record_from_json(d: dict, line_no: int | None = None) -> tuple[FrameRecord, Split | None]:
    fid = d.get("frame_id") if isinstance(d, dict) else None
    where = f"line {line_no}" if line_no is not None else "record"
    where += f" (frame_id {fid!r})" if fid is not None else ""

    def fail(msg):
        return ManifestError(f"{where}: {msg}")

    if not isinstance(d, dict):
        raise fail("expected a JSON object")
    unknown = set(d) - set(_REQUIRED) - set(_OPTIONAL)
    if unknown:
        raise fail(f"unknown fields {sorted(unknown)}")
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise fail(f"missing fields {missing}")
    try:
        if not isinstance(d["frame_id"], str) or not d["frame_id"]:
            raise ValidationError("frame_id must be a non-empty string")
        for key in ("width", "height"):
            if not isinstance(d[key], int) or isinstance(d[key], bool):
                raise ValidationError(f"{key} must be an integer")
        polys = []
        for p in d["polygons"]:
            if set(p) != {"class", "points"}:
                raise ValidationError(f"polygon fields must be class and points, got {sorted(p)}")
            pts = np.asarray(p["points"], dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 2:
                raise ValidationError("polygon points must be a list of [x, y] pairs")
            polys.append(Polygon(pts, SoilingClass.from_token(p["class"])))
        label = d.get("label")
        record = FrameRecord(
            frame_id=d["frame_id"],
            camera=Camera.parse(d["camera"]),
            width=d["width"],
            height=d["height"],
            polygons=tuple(polys),
            image_path=str(d["image"]),
            seg_path=d.get("seg"),
            objects=tuple(tuple(float(v) for v in b) for b in d.get("objects", ())),
            augmented=bool(d.get("augmented", False)),
            label=tuple(int(v) for v in label) if label is not None else None,
        ).validate()
        split = Split.parse(d["split"]) if "split" in d else None
    except (ValidationError, ValueError, TypeError) as exc:
        raise fail(str(exc)) from exc
    return record, split


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    lines = []
    if manifest.split_seed is not None:
        lines.append(json.dumps({"manifest": {"version": MANIFEST_VERSION,
                                              "split_seed": manifest.split_seed}}))
    for r in manifest.records:
        lines.append(json.dumps(record_to_json(r, manifest.split_assignment.get(r.frame_id))))
    text = "\n".join(lines) + ("\n" if lines else "")
    Path(path).write_text(text, encoding="utf-8")


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    records: list[FrameRecord] = []
    assignment: dict[str, Split] = {}
    split_seed = None
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            if isinstance(d, dict) and "manifest" in d:
                if records or line_no != 1 or set(d) != {"manifest"}:
                    raise ManifestError(f"line {line_no}: manifest header must be the first line")
                header = d["manifest"]
                if header.get("version") != MANIFEST_VERSION:
                    raise ManifestError(f"unsupported manifest version {header.get('version')!r}")
                split_seed = header.get("split_seed")
                continue
            record, split = record_from_json(d, line_no)
            if record.frame_id in seen:
                raise ManifestError(f"line {line_no}: duplicate frame_id {record.frame_id!r}")
            seen.add(record.frame_id)
            records.append(record)
            if split is not None:
                assignment[record.frame_id] = split
    return DatasetManifest(records, assignment, split_seed)


# -- arrays for training ----------------------------------------------------

@dataclass
class FrameArrays:
    """Stacked per-frame inputs and targets for a list of records."""

    records: list[FrameRecord]
    images: np.ndarray              # (N, 3, H, W) uint8
    image_labels: np.ndarray        # (N, 2) uint8
    tile_labels: np.ndarray | None  # (N, 2, Gh, Gw) uint8
    seg: np.ndarray | None          # (N, H, W) int64
    boxes: list[np.ndarray]         # per frame (k, 4) float64
    dense: np.ndarray | None = None  # (N,) bool, False for augmented frames

    def __len__(self):
        return len(self.records)

    def subset(self, idx) -> "FrameArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return FrameArrays([self.records[i] for i in idx], self.images[idx],
                           self.image_labels[idx],
                           None if self.tile_labels is None else self.tile_labels[idx],
                           None if self.seg is None else self.seg[idx],
                           [self.boxes[i] for i in idx],
                           None if self.dense is None else self.dense[idx])


def tile_labels(record: FrameRecord, tile_size: int, tau: float,
                samples_per_side: int = 16) -> np.ndarray:
    """(2, Gh, Gw) binary tile labels of one frame."""
    spec = TileSpec(record.width, record.height, tile_size)
    cov = rasterize_to_grid(record.polygons, spec, samples_per_side, record.frame_id)
    return threshold_grid(cov, tau).transpose(2, 0, 1)


def load_frame_arrays(records: Sequence[FrameRecord], root: str | os.PathLike,
                      tile_size: int | None = None, tau: float = 0.25,
                      samples_per_side: int = 16, min_area_frac: float = 0.0,
                      with_seg: bool = False, label_cache: dict | None = None) -> FrameArrays:
    """Read images (and optional co-task targets) for ``records`` under ``root``.

    ``label_cache`` maps frame_id to precomputed (2, Gh, Gw) tile labels, e.g.
    from the rasterize command; missing entries are computed on the fly.
    Augmented frames carry no dense targets: their tile labels and
    segmentation maps are zero-filled and ``dense`` is False.
    """
    root = Path(root)
    if not records:
        raise ManifestError("no records to load")
    imgs, labels, tiles, segs, boxes = [], [], [], [], []
    for r in records:
        img = read_ppm(root / r.image_path)
        if img.shape != (r.height, r.width, 3):
            raise ManifestError(f"image of frame {r.frame_id!r} has shape {img.shape}, "
                                f"manifest says {r.width}x{r.height}")
        imgs.append(img.transpose(2, 0, 1))
        labels.append(image_level_label(r, min_area_frac))
        if tile_size is not None:
            if r.augmented:
                spec = TileSpec(r.width, r.height, tile_size)
                tiles.append(np.zeros((2,) + spec.shape, dtype=np.uint8))
            elif label_cache is not None and r.frame_id in label_cache:
                tiles.append(label_cache[r.frame_id])
            else:
                tiles.append(tile_labels(r, tile_size, tau, samples_per_side))
        if with_seg and r.augmented:
            segs.append(np.zeros((r.height, r.width), dtype=np.int64))
        elif with_seg:
            if r.seg_path is None:
                raise ManifestError(f"frame {r.frame_id!r} has no segmentation map")
            segs.append(read_pgm(root / r.seg_path).astype(np.int64))
        boxes.append(np.asarray(r.objects, dtype=np.float64).reshape(-1, 4))
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ManifestError(f"frames have mixed dimensions: {sorted(shapes)}")
    return FrameArrays(list(records), np.stack(imgs), np.stack(labels),
                       np.stack(tiles) if tiles else None,
                       np.stack(segs) if with_seg else None, boxes,
                       np.array([not r.augmented for r in records], dtype=bool))

