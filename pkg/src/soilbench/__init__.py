"""Camera soiling detection: annotations to tile labels, a multi-task CNN,
CycleGAN augmentation and the evaluation harness, on synthetic data."""

__version__ = "0.1.0"
