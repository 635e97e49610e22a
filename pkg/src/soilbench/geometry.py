"""Polygon annotations to per-tile coverage fractions and binary tile labels.

Coverage is estimated by stratified supersampling: every tile is split into
``samples_per_side x samples_per_side`` equal sub-cells and the sub-cell
centres are tested against the union of same-class polygons (even-odd rule
per polygon, OR across polygons). Tiles at the right and bottom border are
clipped to the image, and their coverage is relative to the clipped area.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "SoilingClass",
    "Polygon",
    "TileSpec",
    "polygon_area",
    "is_simple",
    "validate_polygon",
    "points_in_polygon",
    "points_in_region",
    "point_in_region",
    "tile_coverage",
    "rasterize_to_grid",
    "threshold_grid",
]

DEFAULT_SAMPLES_PER_SIDE = 16
DEFAULT_TAU = 0.25


class SoilingClass(enum.IntEnum):
    """Soiling class; the integer value is the channel index in label arrays."""

    OPAQUE = 0
    TRANSPARENT = 1

    @property
    def token(self) -> str:
        return self.name.lower()

    @classmethod
    def from_token(cls, token: str) -> "SoilingClass":
        try:
            return cls[token.upper()]
        except KeyError:
            raise ValidationError(f"unknown soiling class {token!r}") from None


@dataclass(frozen=True, eq=False)
class Polygon:
    """Closed polygon in pixel coordinates carrying exactly one soiling class.

    ``vertices`` is an (n, 2) float64 array of (x, y); the closing edge from
    the last vertex back to the first is implicit.
    """

    vertices: np.ndarray
    soiling_class: SoilingClass

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 2)
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "soiling_class", SoilingClass(self.soiling_class))

    def __eq__(self, other):
        if not isinstance(other, Polygon):
            return NotImplemented
        return (self.soiling_class == other.soiling_class
                and self.vertices.shape == other.vertices.shape
                and bool(np.all(self.vertices == other.vertices)))

    def __hash__(self):
        return hash((int(self.soiling_class), self.vertices.tobytes()))

    def __repr__(self):
        return f"Polygon({self.soiling_class.token}, {len(self.vertices)} vertices)"

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        x0, y0 = self.vertices.min(axis=0)
        x1, y1 = self.vertices.max(axis=0)
        return float(x0), float(y0), float(x1), float(y1)


@dataclass(frozen=True)
class TileSpec:
    image_width: int
    image_height: int
    tile_size: int

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValidationError(f"tile_size must be >= 1, got {self.tile_size}")
        if self.image_width < 1 or self.image_height < 1:
            raise ValidationError("image dimensions must be positive")

    @property
    def grid_w(self) -> int:
        return math.ceil(self.image_width / self.tile_size)

    @property
    def grid_h(self) -> int:
        return math.ceil(self.image_height / self.tile_size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid_h, self.grid_w

    def tile_rect(self, row: int, col: int) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) of a tile, clipped to the image."""
        t = self.tile_size
        return (col * t, row * t,
                min((col + 1) * t, self.image_width),
                min((row + 1) * t, self.image_height))


def polygon_area(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p) -> bool:
    return (min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= p[1] <= max(a[1], b[1]))


def _segments_touch(p1, p2, q1, q2) -> bool:
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and \
            ((d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)):
        return True
    if d1 == 0 and _on_segment(q1, q2, p1):
        return True
    if d2 == 0 and _on_segment(q1, q2, p2):
        return True
    if d3 == 0 and _on_segment(p1, p2, q1):
        return True
    if d4 == 0 and _on_segment(p1, p2, q2):
        return True
    return False


def is_simple(vertices: np.ndarray) -> bool:
    """True if no two non-adjacent edges of the closed polygon touch."""
    v = [tuple(p) for p in np.asarray(vertices, dtype=np.float64)]
    n = len(v)
    if n < 3:
        return False
    if any(v[i] == v[(i + 1) % n] for i in range(n)):
        return False
    for i in range(n):
        a1, a2 = v[i], v[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_touch(a1, a2, v[j], v[(j + 1) % n]):
                return False
    # collinear-fold degeneracies slip past the pairwise test on triangles
    return polygon_area(np.asarray(v)) > 0.0


def validate_polygon(poly: Polygon, width: float | None = None, height: float | None = None,
                     frame_id: str | None = None) -> Polygon:
    where = f" in frame {frame_id!r}" if frame_id is not None else ""
    v = poly.vertices
    if len(v) < 3:
        raise ValidationError(f"polygon{where} has {len(v)} vertices; at least 3 required")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"polygon{where} has non-finite vertices")
    if width is not None and height is not None:
        bad = (v[:, 0] < 0) | (v[:, 0] > width) | (v[:, 1] < 0) | (v[:, 1] > height)
        if bad.any():
            x, y = v[np.argmax(bad)]
            raise ValidationError(
                f"polygon vertex ({x}, {y}){where} lies outside the {width}x{height} image")
    if not is_simple(v):
        raise ValidationError(f"polygon{where} is self-intersecting or degenerate")
    return poly


def points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd test for an (m, 2) array of points against one polygon."""
    pts = np.asarray(points, dtype=np.float64)
    px, py = pts[..., 0], pts[..., 1]
    v = np.asarray(vertices, dtype=np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    xj, yj = v[-1]
    for xi, yi in v:
        if yi != yj:
            crosses = (yi > py) != (yj > py)
            x_cross = xi + (py - yi) * (xj - xi) / (yj - yi)
            inside ^= crosses & (px < x_cross)
        xj, yj = xi, yi
    return inside


def points_in_region(points: np.ndarray, polygons: Iterable[Polygon]) -> np.ndarray:
    """Union membership: True where a point lies inside any of ``polygons``."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.zeros(pts.shape[:-1], dtype=bool)
    for poly in polygons:
        x0, y0, x1, y1 = poly.bbox
        near = ((pts[..., 0] >= x0) & (pts[..., 0] <= x1)
                & (pts[..., 1] >= y0) & (pts[..., 1] <= y1) & ~out)
        if near.any():
            out[near] = points_in_polygon(pts[near], poly.vertices)
    return out


def point_in_region(p: Sequence[float], polygons: Iterable[Polygon]) -> bool:
    return bool(points_in_region(np.asarray([p], dtype=np.float64), polygons)[0])


def _sample_points(x0, y0, x1, y1, s: int) -> np.ndarray:
    """Sub-cell centres of rectangles; the leading shapes of the bounds broadcast."""
    k = (np.arange(s, dtype=np.float64) + 0.5) / s
    x0, y0, x1, y1 = (np.asarray(a, dtype=np.float64)[..., None] for a in (x0, y0, x1, y1))
    xs = x0 + k * (x1 - x0)
    ys = y0 + k * (y1 - y0)
    # (..., s_y, s_x, 2)
    xx = np.broadcast_to(xs[..., None, :], xs.shape[:-1] + (s, s))
    yy = np.broadcast_to(ys[..., :, None], ys.shape[:-1] + (s, s))
    return np.stack([xx, yy], axis=-1)


def tile_coverage(polygons: Sequence[Polygon], tile: tuple[float, float, float, float],
                  samples_per_side: int = DEFAULT_SAMPLES_PER_SIDE) -> float:
    """Fraction of a rectangle ``(x0, y0, x1, y1)`` covered by the polygon union."""
    if samples_per_side < 1:
        raise ValueError("samples_per_side must be >= 1")
    pts = _sample_points(*tile, samples_per_side)
    return float(points_in_region(pts, polygons).mean())


def rasterize_to_grid(frame_polygons: Sequence[Polygon], spec: TileSpec,
                      samples_per_side: int = DEFAULT_SAMPLES_PER_SIDE,
                      frame_id: str | None = None) -> np.ndarray:
    """Coverage grid of shape (grid_h, grid_w, 2), channels ordered by SoilingClass."""
    if samples_per_side < 1:
        raise ValueError("samples_per_side must be >= 1")
    for poly in frame_polygons:
        validate_polygon(poly, spec.image_width, spec.image_height, frame_id)
    gh, gw = spec.shape
    t = spec.tile_size
    cols = np.arange(gw)
    rows = np.arange(gh)
    x0 = np.broadcast_to(cols * t, (gh, gw))
    x1 = np.broadcast_to(np.minimum((cols + 1) * t, spec.image_width), (gh, gw))
    y0 = np.broadcast_to((rows * t)[:, None], (gh, gw))
    y1 = np.broadcast_to(np.minimum((rows + 1) * t, spec.image_height)[:, None], (gh, gw))
    pts = _sample_points(x0, y0, x1, y1, samples_per_side)
    cov = np.zeros((gh, gw, len(SoilingClass)), dtype=np.float64)
    for cls in SoilingClass:
        polys = [p for p in frame_polygons if p.soiling_class == cls]
        if polys:
            cov[..., cls] = points_in_region(pts, polys).mean(axis=(-2, -1))
    return cov


def threshold_grid(cov: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Binary tile labels: 1 where coverage is strictly greater than ``tau``."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    return (np.asarray(cov) > tau).astype(np.uint8)
