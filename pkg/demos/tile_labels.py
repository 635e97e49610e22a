"""From polygons to tile labels on a single frame.

Draws one opaque and one transparent polygon on a 64x32 frame, prints the
per-tile coverage of each class and the thresholded class vectors.
"""
import numpy as np

from soilbench.geometry import Polygon, SoilingClass, TileSpec, rasterize_to_grid, threshold_grid

spec = TileSpec(64, 32, 8)
polys = [
    Polygon([(3, 2), (30, 5), (22, 27), (6, 20)], SoilingClass.OPAQUE),
    Polygon([(28, 10), (60, 8), (58, 30), (34, 26)], SoilingClass.TRANSPARENT),
]
cov = rasterize_to_grid(polys, spec)
labels = threshold_grid(cov, tau=0.25)

np.set_printoptions(precision=2, suppress=True, linewidth=120)
for cls in SoilingClass:
    print(f"{cls.name.lower()} coverage")
    print(cov[..., cls])
print("class vectors [opaque, transparent] per tile")
for row in labels:
    print(" ".join(f"{o}{t}" for o, t in row))
