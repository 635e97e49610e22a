"""Central finite-difference checks for every differentiable op.

Each check builds float32 inputs, projects the op output onto a fixed random
direction ``R`` (so the scalar objective is ``sum(out * R)`` accumulated in
float64) and compares the analytic gradient with central differences at
step ``h``. The error reported is ``||g_analytic - g_numeric|| /
max(||g_analytic||, ||g_numeric||)`` over the checked coordinates. Large
tensors are checked on a seeded subset of coordinates.

ReLU, leaky ReLU and L1 are not differentiable at zero. A coordinate whose
``+h`` and ``-h`` evaluations take a different branch somewhere in the graph
straddles such a kink; it is excluded, and a check fails outright if more
than half of its coordinates had to be excluded.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gan
from .nn import functional as F
from .nn.layers import (DetHead, Encoder, EncoderConfig, Module, ResidualBlock, SegHead,
                        SoilingHead)
from .nn.tensor import DTYPE, Parameter, Tensor
from .nn.train import det_loss, det_targets

H = 1e-3
OP_TOL = 1e-3
NET_TOL = 1e-2
MAX_COORDS = 64


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tol


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[dict], Tensor], inputs: dict[str, np.ndarray],
                    seed: int = 0, h: float = H, max_coords: int = MAX_COORDS) -> float:
    """Compare analytic and numeric gradients of ``fn`` w.r.t. every input array.

    ``fn`` receives a dict of Tensors (same keys as ``inputs``) and returns a
    Tensor of any shape; parameters inside ``fn`` that are not in ``inputs``
    are treated as constants.
    """
    rng = np.random.default_rng(seed)
    arrays = {k: np.array(v, dtype=DTYPE) for k, v in inputs.items()}
    leaves = {k: Parameter(v) for k, v in arrays.items()}
    out = fn(leaves)
    proj = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
    (out * Tensor(proj)).sum().backward()

    def objective(values):
        F._kink_log = []
        try:
            y = fn({k: Tensor(v) for k, v in values.items()})
            branches = tuple(F._kink_log)
        finally:
            F._kink_log = None
        return float(np.sum(y.data.astype(np.float64) * proj)), branches

    analytic, numeric = [], []
    total = 0
    for key, arr in arrays.items():
        grad = leaves[key].grad if leaves[key].grad is not None else np.zeros_like(arr)
        flat = np.arange(arr.size)
        if arr.size > max_coords:
            flat = np.sort(rng.choice(arr.size, max_coords, replace=False))
        for i in flat:
            idx = np.unravel_index(i, arr.shape)
            orig = arr[idx]
            plus = dict(arrays)
            minus = dict(arrays)
            plus[key] = arr.copy()
            plus[key][idx] = orig + h
            minus[key] = arr.copy()
            minus[key][idx] = orig - h
            # the actual float32 step, not the nominal one
            step = float(plus[key][idx]) - float(minus[key][idx])
            f_plus, b_plus = objective(plus)
            f_minus, b_minus = objective(minus)
            total += 1
            if b_plus != b_minus:
                continue
            numeric.append((f_plus - f_minus) / step)
            analytic.append(float(grad[idx]))
    if 2 * len(numeric) < total:
        return float("inf")
    return relative_error(np.array(analytic), np.array(numeric))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return x.astype(DTYPE)


def _bind(module, name: str, tensor) -> None:
    owner = module
    parts = name.split(".")
    for part in parts[:-1]:
        if isinstance(owner, list):
            owner = owner[int(part)]
        elif isinstance(owner, dict):
            owner = owner[part]
        else:
            owner = getattr(owner, part)
    setattr(owner, parts[-1], tensor)


def _module_check(module: Module, x: np.ndarray, forward=None, seed: int = 0) -> float:
    """Gradient check over the input ``x`` and every parameter of ``module``."""
    params = dict(module.named_parameters())
    inputs = {"x": x, **{k: p.data.copy() for k, p in params.items()}}
    forward = forward or (lambda m, t: m(t))

    def fn(t):
        for k in params:
            _bind(module, k, t[k])
        return forward(module, t["x"])
    try:
        return check_gradients(fn, inputs, seed)
    finally:
        for k, p in params.items():
            _bind(module, k, p)


def _rng(seed):
    return np.random.default_rng(seed)


def check_conv() -> float:
    r = _rng(1)
    return check_gradients(
        lambda t: F.conv2d(t["x"], t["w"], t["b"], stride=1, padding=1),
        {"x": r.standard_normal((2, 2, 4, 4)), "w": r.standard_normal((3, 2, 3, 3)),
         "b": r.standard_normal(3)})


def check_conv_strided() -> float:
    r = _rng(2)
    return check_gradients(
        lambda t: F.conv2d(t["x"], t["w"], t["b"], stride=2, padding=1),
        {"x": r.standard_normal((1, 2, 5, 6)), "w": r.standard_normal((2, 2, 3, 3)),
         "b": r.standard_normal(2)})


def check_relu() -> float:
    return check_gradients(lambda t: F.relu(t["x"]), {"x": _away_from_zero(_rng(3), (3, 4))})


def check_leaky_relu() -> float:
    return check_gradients(lambda t: F.leaky_relu(t["x"], 0.2),
                           {"x": _away_from_zero(_rng(4), (3, 4))})


def check_softsign() -> float:
    return check_gradients(lambda t: F.softsign(t["x"]),
                           {"x": _away_from_zero(_rng(5), (3, 4)) * 3})


def check_softsign_probability() -> float:
    return check_gradients(lambda t: F.softsign_probability(t["x"]),
                           {"x": _away_from_zero(_rng(6), (3, 4)) * 3})


def check_tanh() -> float:
    return check_gradients(lambda t: F.tanh(t["x"]), {"x": _rng(7).standard_normal((3, 4))})


def check_sigmoid() -> float:
    return check_gradients(lambda t: F.sigmoid(t["x"]), {"x": _rng(8).standard_normal((3, 4))})


def check_upsample() -> float:
    return check_gradients(lambda t: F.upsample2x(t["x"]),
                           {"x": _rng(9).standard_normal((1, 2, 2, 3))})


def check_bce() -> float:
    r = _rng(10)
    target = r.integers(0, 2, (1, 2, 2, 2)).astype(np.float64)
    return check_gradients(lambda t: F.bce(t["p"], target),
                           {"p": r.uniform(0.1, 0.9, (1, 2, 2, 2))})


def check_bce_logits() -> float:
    r = _rng(11)
    target = r.integers(0, 2, (2, 3, 3)).astype(np.float64)
    return check_gradients(lambda t: F.bce_with_logits(t["z"], target),
                           {"z": r.standard_normal((2, 3, 3))})


def check_softmax_ce() -> float:
    r = _rng(12)
    labels = r.integers(0, 3, (1, 4, 4))
    return check_gradients(lambda t: F.softmax_cross_entropy(t["z"], labels),
                           {"z": r.standard_normal((1, 3, 4, 4))})


def check_l1() -> float:
    r = _rng(13)
    a = r.standard_normal((1, 3, 4, 4))
    b = a + _away_from_zero(r, a.shape, 0.05)
    return check_gradients(lambda t: F.l1_loss(t["a"], t["b"]), {"a": a, "b": b})


def check_lsgan() -> float:
    r = _rng(14)
    return check_gradients(
        lambda t: gan.lsgan_d_loss(t["real"], t["fake"]) + gan.lsgan_g_loss(t["fake"]) * 0.7,
        {"real": r.standard_normal((2, 1, 2, 2)), "fake": r.standard_normal((2, 1, 2, 2))})


def check_residual_block() -> float:
    block = ResidualBlock(2, 3, stride=2, rng=_rng(15))
    return _module_check(block, _rng(16).standard_normal((1, 2, 4, 4)))


def check_soiling_head() -> float:
    head = SoilingHead(4, (2, 2), "tile", hidden=3, rng=_rng(17))
    return _module_check(head, _rng(18).standard_normal((1, 4, 2, 2)))


def check_image_head() -> float:
    head = SoilingHead(4, (4, 4), "image", hidden=3, image_stride=2, rng=_rng(19))
    return _module_check(head, _rng(20).standard_normal((1, 4, 4, 4)))


def check_seg_head() -> float:
    head = SegHead(3, downsample=2, num_classes=3, hidden=4, rng=_rng(21))
    labels = _rng(22).integers(0, 3, (1, 4, 4))
    return _module_check(head, _rng(23).standard_normal((1, 3, 2, 2)),
                         forward=lambda m, x: F.softmax_cross_entropy(m(x), labels))


def check_det_head() -> float:
    head = DetHead(3, rng=_rng(24))
    boxes = [np.array([[1.0, 1.0, 5.0, 6.0]])]
    obj, box = det_targets(boxes, (2, 2), (8, 8))
    return _module_check(head, _rng(25).standard_normal((1, 3, 2, 2)),
                         forward=lambda m, x: det_loss(m(x), obj, box))


class _Pair(Module):
    def __init__(self, first, second):
        self.first = first
        self.second = second


def check_cycle_loss() -> float:
    cfg = gan.GeneratorConfig(channels=3, base=2, n_down=1, n_res=1)
    pair = _Pair(gan.Generator(cfg, _rng(26)), gan.Generator(cfg, _rng(27)))
    # targets outside tanh's range keep every L1 term on one side of its kink
    b = Tensor(_away_from_zero(_rng(29), (1, 3, 8, 8), 0.7) * 1.5)
    return _module_check(pair, _away_from_zero(_rng(28), (1, 3, 8, 8), 0.7) * 1.5,
                         forward=lambda m, x: gan.cycle_loss(m.first, m.second, x, b))


def check_miniature_encoder() -> float:
    """End to end: stem, two residual blocks, tile head and BCE."""
    cfg = EncoderConfig(in_channels=3, input_height=8, input_width=8, stem_channels=3,
                        stem_stride=2, widths=(3, 4), strides=(1, 2))
    net = _Pair(Encoder(cfg, _rng(30)), SoilingHead(4, cfg.feature_hw, "tile", hidden=3,
                                                    rng=_rng(31)))
    target = _rng(32).integers(0, 2, (1, 2) + cfg.feature_hw)
    return _module_check(net, _rng(33).uniform(-1, 1, (1, 3, 8, 8)),
                         forward=lambda m, x: F.bce(m.second(m.first(x)), target))


CHECKS: list[tuple[str, Callable[[], float], float]] = [
    ("conv2d", check_conv, OP_TOL),
    ("conv2d_strided", check_conv_strided, OP_TOL),
    ("relu", check_relu, OP_TOL),
    ("leaky_relu", check_leaky_relu, OP_TOL),
    ("softsign", check_softsign, OP_TOL),
    ("softsign_probability", check_softsign_probability, OP_TOL),
    ("sigmoid", check_sigmoid, OP_TOL),
    ("tanh", check_tanh, OP_TOL),
    ("upsample2x", check_upsample, OP_TOL),
    ("bce", check_bce, OP_TOL),
    ("bce_with_logits", check_bce_logits, OP_TOL),
    ("softmax_cross_entropy", check_softmax_ce, OP_TOL),
    ("l1", check_l1, OP_TOL),
    ("lsgan", check_lsgan, OP_TOL),
    ("residual_block", check_residual_block, OP_TOL),
    ("soiling_head_tile", check_soiling_head, OP_TOL),
    ("soiling_head_image", check_image_head, OP_TOL),
    ("seg_head", check_seg_head, OP_TOL),
    ("det_head", check_det_head, OP_TOL),
    ("cycle_loss", check_cycle_loss, NET_TOL),
    ("miniature_encoder", check_miniature_encoder, NET_TOL),
]


def run_all() -> list[CheckResult]:
    results = []
    for name, fn, tol in CHECKS:
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return results
