"""Task losses, multi-task scalarization, the training loop and grid search."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, NumericalError, SoilbenchError
from . import functional as F
from .layers import DET, IMAGE, SEG, TILE, SoilingNet, normalize_images
from .optim import DEFAULT_LR, Adam
from .tensor import Tensor

log = logging.getLogger(__name__)


def multitask_loss(task_losses: Sequence, weights: Sequence[float]):
    """Weighted average sum(w_i * L_i) / sum(w_i); works on floats and Tensors."""
    if len(task_losses) != len(weights):
        raise ConfigError(f"{len(task_losses)} losses but {len(weights)} weights")
    if not task_losses:
        raise ConfigError("multitask_loss needs at least one task")
    if any(w < 0 for w in weights):
        raise ConfigError(f"task weights must be non-negative, got {tuple(weights)}")
    total_w = float(sum(weights))
    if total_w <= 0:
        raise ConfigError("task weights are all zero")
    total = None
    for loss, w in zip(task_losses, weights):
        if w == 0:
            continue
        term = loss * float(w)
        total = term if total is None else total + term
    return total / total_w


def det_targets(boxes: Sequence[np.ndarray], grid_hw: tuple[int, int],
                image_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Objectness (N, Gh, Gw) and box targets (N, 4, Gh, Gw) for a batch.

    A box is assigned to the cell holding its centre; box targets are the
    centre offset within that cell and width/height relative to the image.
    """
    gh, gw = grid_hw
    h, w = image_hw
    cell_h, cell_w = h / gh, w / gw
    obj = np.zeros((len(boxes), gh, gw), dtype=np.float64)
    box = np.zeros((len(boxes), 4, gh, gw), dtype=np.float64)
    for n, frame_boxes in enumerate(boxes):
        for x0, y0, x1, y1 in np.asarray(frame_boxes, dtype=np.float64).reshape(-1, 4):
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            col = min(int(cx // cell_w), gw - 1)
            row = min(int(cy // cell_h), gh - 1)
            obj[n, row, col] = 1.0
            box[n, :, row, col] = (cx / cell_w - col, cy / cell_h - row,
                                   (x1 - x0) / w, (y1 - y0) / h)
    return obj, box


def det_loss(out: Tensor, obj: np.ndarray, box: np.ndarray) -> Tensor:
    """Objectness BCE over all cells plus squared box error on cells with a centre."""
    return F.bce_with_logits(out[:, 0], obj) + F.masked_sq_error(out[:, 1:], box, obj)


@dataclass
class Batch:
    images: np.ndarray                       # (n, 3, H, W) uint8
    image_labels: np.ndarray | None = None   # (n, 2)
    tile_labels: np.ndarray | None = None    # (n, 2, Gh, Gw)
    seg: np.ndarray | None = None            # (n, H, W)
    boxes: list | None = None
    dense: np.ndarray | None = None          # (n,) bool: tile/seg/det targets exist


def task_losses(model: SoilingNet, outputs: dict[str, Tensor], batch: Batch) -> dict[str, Tensor]:
    """Loss per head; heads whose targets are missing for the whole batch are skipped."""
    n = len(batch.images)
    dense = batch.dense if batch.dense is not None else np.ones(n, dtype=bool)
    idx = np.flatnonzero(dense)
    losses = {}
    for name, out in outputs.items():
        if name == IMAGE:
            losses[name] = F.bce(out, batch.image_labels.reshape(n, 2, 1, 1))
            continue
        if idx.size == 0:
            continue
        sub = out if idx.size == n else out[idx]
        if name == TILE:
            losses[name] = F.bce(sub, batch.tile_labels[idx])
        elif name == SEG:
            losses[name] = F.softmax_cross_entropy(sub, batch.seg[idx])
        elif name == DET:
            enc = model.cfg.encoder
            obj, box = det_targets([batch.boxes[i] for i in idx], enc.feature_hw,
                                   (enc.input_height, enc.input_width))
            losses[name] = det_loss(sub, obj, box)
    return losses


@dataclass
class TrainConfig:
    lr: float = DEFAULT_LR
    steps: int = 200
    batch_size: int = 16
    seed: int = 0
    weights: dict[str, float] = field(default_factory=dict)

    def weight_of(self, head: str) -> float:
        return float(self.weights.get(head, 1.0))


def batch_from_arrays(data, idx) -> Batch:
    """Slice a :class:`~soilbench.dataset.FrameArrays` into a :class:`Batch`."""
    idx = np.asarray(idx)
    return Batch(
        images=data.images[idx],
        image_labels=data.image_labels[idx],
        tile_labels=None if data.tile_labels is None else data.tile_labels[idx],
        seg=None if data.seg is None else data.seg[idx],
        boxes=[data.boxes[i] for i in idx],
        dense=None if data.dense is None else data.dense[idx],
    )


def fit(model: SoilingNet, data, cfg: TrainConfig, optimizer: Adam | None = None,
        on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Train ``model`` in place for ``cfg.steps`` minibatch steps.

    Minibatches walk seeded permutations of the data, epoch after epoch, so the
    run is a pure function of (model init, data, cfg). Returns one history
    entry per step.
    """
    n = len(data)
    if n == 0:
        raise ConfigError("no training frames")
    opt = optimizer or Adam(model.named_parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    heads = list(model.heads)
    bs = min(cfg.batch_size, n)
    history = []
    order = np.empty(0, dtype=np.int64)
    for step in range(cfg.steps):
        if order.size < bs:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = np.sort(order[:bs]), order[bs:]
        batch = batch_from_arrays(data, idx)
        x = Tensor(normalize_images(batch.images))
        outputs = model(x)
        losses = task_losses(model, outputs, batch)
        names = [h for h in heads if h in losses]
        total = multitask_loss([losses[h] for h in names], [cfg.weight_of(h) for h in names])
        opt.zero_grad()
        try:
            total.backward()
            opt.step()
        except NumericalError as exc:
            raise NumericalError(f"training diverged at step {step + 1}: {exc}") from exc
        entry = {"step": step + 1, "loss": total.item()}
        entry.update({h: losses[h].item() for h in names})
        history.append(entry)
        if on_step is not None:
            on_step(entry)
    return history


def predict(model: SoilingNet, images: np.ndarray, batch_size: int = 32) -> dict[str, np.ndarray]:
    """Forward ``images`` (uint8 NCHW) in fixed-size chunks; returns numpy outputs."""
    chunks: dict[str, list] = {}
    for start in range(0, len(images), batch_size):
        x = Tensor(normalize_images(images[start:start + batch_size]))
        for name, out in model(x).items():
            chunks.setdefault(name, []).append(out.data)
    return {k: np.concatenate(v) for k, v in chunks.items()}


class GridSearchError(SoilbenchError):
    code = "E_GRID"

    def __init__(self, weights, cause: BaseException):
        super().__init__(f"training with weights {tuple(weights)} failed: {cause}")
        self.weights = tuple(weights)
        self.exit_code = getattr(cause, "exit_code", self.exit_code)


def grid_search(weight_grid: Sequence[Sequence[float]], train_fn: Callable,
                val_metric: Callable) -> tuple[tuple[float, ...], list[float]]:
    """Return the weight vector with the highest validation metric and all scores.

    ``train_fn(weights)`` trains and returns whatever ``val_metric`` needs.
    Ties go to the earliest vector in grid order.
    """
    if not weight_grid:
        raise ConfigError("grid search needs at least one weight vector")
    best, best_score, scores = None, -np.inf, []
    for weights in weight_grid:
        try:
            score = float(val_metric(train_fn(tuple(weights))))
        except Exception as exc:
            raise GridSearchError(weights, exc) from exc
        scores.append(score)
        log.info("grid search: weights %s -> %.6f", tuple(weights), score)
        if score > best_score:
            best, best_score = tuple(weights), score
    if best is None:
        best = tuple(weight_grid[0])
    return best, scores
