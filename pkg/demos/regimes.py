"""Camera regimes on a small synthetic set.

Trains on front/rear cameras and tests on all four (regime 2), then trains
and tests on all four (regime 3), and prints both confusion diagonals. Side
cameras have their own palette, so regime 2 should come out lower.
Takes a few minutes; pass a smaller frame count as argv[1] to go faster.
"""
import sys
import tempfile

from soilbench.dataset import Category, apply_split
from soilbench.evaluation import REGIMES, format_summary, run_regime
from soilbench.nn import ModelConfig, TrainConfig
from soilbench.synth import SynthConfig, build_synthetic_dataset

n = int(sys.argv[1]) if len(sys.argv) > 1 else 400
root = tempfile.mkdtemp(prefix="soilbench-")
cfg = SynthConfig(seed=0, n_frames=n, desaturation=0.75,
                  category_quotas={c: n // 4 for c in Category})
manifest = apply_split(build_synthetic_dataset(cfg, root), seed=0)

model = ModelConfig(heads=("tile", "image"))
train = TrainConfig(steps=600, batch_size=16, lr=1e-3, weights={"image": 0.1})
cache = {}
for regime in ("2", "3"):
    report, _ = run_regime(manifest, root, *REGIMES[regime], model, train, seed=0,
                           label_cache=cache)
    print(f"== regime {regime}")
    print(format_summary(report))
