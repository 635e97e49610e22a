"""Differentiable ops and losses on :class:`~soilbench.nn.tensor.Tensor`."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import DTYPE, Tensor

BCE_EPS = 1e-7

# When a list is installed here, piecewise-linear ops append their branch
# pattern; gradient checks use it to skip coordinates whose finite-difference
# stencil straddles a kink.
_kink_log: list | None = None


def _log_branches(mask: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask, axis=None).tobytes())


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of an NCHW batch with an (O, C, kh, kw) kernel."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {c2}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {o} output channels")
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(wd, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{wd} with padding {ph},{pw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    # columns as (C*kh*kw, N*Ho*Wo): the copy walks image rows, which is much
    # cheaper than gathering patch-major rows
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    y = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if w.requires_grad:
            w._accumulate((g2 @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n) + xp.shape[2:], dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += \
                        dcols[:, i, j]
            x._accumulate(dxp.transpose(1, 0, 2, 3)[:, :, ph:ph + h, pw:pw + wd])

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(y, parents, backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branches(mask)

    def backward(g):
        x._accumulate(g * mask)
    return Tensor.from_op(x.data * mask, (x,), backward, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    _log_branches(pos)
    scale = np.where(pos, 1.0, slope).astype(DTYPE)

    def backward(g):
        x._accumulate(g * scale)
    return Tensor.from_op(x.data * scale, (x,), backward, "leaky_relu")


def softsign(x: Tensor) -> Tensor:
    """x / (1 + |x|), range (-1, 1)."""
    denom = 1.0 + np.abs(x.data)

    def backward(g):
        x._accumulate(g / (denom * denom))
    return Tensor.from_op(x.data / denom, (x,), backward, "softsign")


def softsign_probability(x: Tensor) -> Tensor:
    """Softsign mapped affinely onto (0, 1): (softsign(x) + 1) / 2."""
    denom = 1.0 + np.abs(x.data)

    def backward(g):
        x._accumulate(0.5 * g / (denom * denom))
    return Tensor.from_op(0.5 * (x.data / denom + 1.0), (x,), backward, "softsign_prob")


def sigmoid(x: Tensor) -> Tensor:
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))
    return Tensor.from_op(s, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - t * t))
    return Tensor.from_op(t, (x,), backward, "tanh")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    n, c, h, w = x.shape
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    return Tensor.from_op(y, (x,), backward, "upsample2x")


# -- losses ------------------------------------------------------------------

def bce(p: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets.

    Probabilities are clamped to [eps, 1 - eps]; the clamp has zero gradient
    outside that interval.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"bce shape mismatch: prediction {p.shape}, target {t.shape}")
    raw = p.data.astype(np.float64)
    pc = np.clip(raw, eps, 1.0 - eps)
    loss = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)).mean()
    inside = (raw >= eps) & (raw <= 1.0 - eps)
    n = p.size

    def backward(g):
        d = (pc - t) / (pc * (1.0 - pc)) / n * inside
        p._accumulate(g * d)
    return Tensor.from_op(loss, (p,), backward, "bce")


def bce_with_logits(z: Tensor, target, mask=None) -> Tensor:
    """Mean BCE on logits, numerically stable; optional 0/1 mask sets the support."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"bce_with_logits shape mismatch: {z.shape} vs {t.shape}")
    x = z.data.astype(np.float64)
    m = np.ones_like(x) if mask is None else np.asarray(mask, dtype=np.float64)
    n = max(float(m.sum()), 1.0)
    loss = (m * (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))).sum() / n
    s = 0.5 * (1.0 + np.tanh(0.5 * x))

    def backward(g):
        z._accumulate(g * m * (s - t) / n)
    return Tensor.from_op(loss, (z,), backward, "bce_logits")


def softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over every position; class axis is 1 (N, K, ...)."""
    y = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if y.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"label shape {y.shape} does not match logits {logits.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ShapeError(f"labels must lie in [0, {k})")
    x = logits.data.astype(np.float64)
    z = x - x.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    onehot = np.moveaxis(np.eye(k)[y], -1, 1)
    m = y.size
    loss = -(logp * onehot).sum() / m

    def backward(g):
        logits._accumulate(g * (np.exp(logp) - onehot) / m)
    return Tensor.from_op(loss, (logits,), backward, "softmax_ce")


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; sign(0) is taken as 0."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data
    sign = np.sign(diff)
    _log_branches(sign > 0)
    n = a.size

    def backward(g):
        a._accumulate(g * sign / n)
        b._accumulate(-g * sign / n)
    return Tensor.from_op(np.abs(diff).mean(), (a, b), backward, "l1")


def mse_to(x: Tensor, value: float) -> Tensor:
    """Mean squared distance of every element to a constant."""
    d = x.data.astype(np.float64) - value
    n = x.size

    def backward(g):
        x._accumulate(g * 2.0 * d / n)
    return Tensor.from_op((d * d).mean(), (x,), backward, "mse_const")


def masked_sq_error(pred: Tensor, target, cell_mask) -> Tensor:
    """Squared error summed over channels of masked cells, averaged over those cells.

    ``pred`` and ``target`` are (N, K, H, W); ``cell_mask`` is (N, H, W). With an
    empty mask the loss is exactly 0.
    """
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(cell_mask, dtype=np.float64)
    if t.shape != pred.shape or m.shape != t.shape[:1] + t.shape[2:]:
        raise ShapeError(f"masked_sq_error shapes: pred {pred.shape}, target {t.shape}, "
                         f"mask {m.shape}")
    denom = max(float(m.sum()), 1.0)
    d = (pred.data.astype(np.float64) - t) * m[:, None]

    def backward(g):
        pred._accumulate(g * 2.0 * d / denom)
    return Tensor.from_op((d * d).sum() / denom, (pred,), backward, "masked_sq")
