"""Toy CycleGAN between clean and opaque-soiled crops, then augmentation.

Trains the generators on 16x16 crops, prints the cycle loss every 10 epochs,
and appends generator-soiled copies of half the clean training frames to
the manifest.
"""
import tempfile

from soilbench.dataset import Category, Split, apply_split
from soilbench.gan import augment_manifest, domain_images, train_cyclegan
from soilbench.synth import SynthConfig, build_synthetic_dataset

root = tempfile.mkdtemp(prefix="soilbench-")
cfg = SynthConfig(seed=0, n_frames=80, category_quotas={c: 20 for c in Category})
manifest = apply_split(build_synthetic_dataset(cfg, root), seed=0)

clean, soiled = domain_images(manifest, root, size=16, count=64, seed=0)
result = train_cyclegan(clean, soiled, epochs=50, seed=0)
for row in result.history[::10] + result.history[-1:]:
    print(f"epoch {row['epoch']:3d}  cycle {row['cycle_loss']:.4f}  "
          f"G_AB {row['g_loss_AB']:.4f}  D_B {row['d_loss_B']:.4f}")

augmented = augment_manifest(manifest, result.g_ab, 0.5, root, seed=0)
new = [r for r in augmented.records if r.augmented]
print(f"{len(new)} augmented frames, all in train: "
      f"{all(augmented.split_assignment[r.frame_id] == Split.TRAIN for r in new)}")
print(f"written under {root}/augmented")
