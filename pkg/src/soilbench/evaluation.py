"""Metrics, report bundles and the train/test camera regimes.

Class vectors are ``[opaque, transparent]`` binary pairs throughout. Ratios
keep their integer numerator and denominator; a zero denominator makes the
ratio undefined (``value is None``) instead of pretending it is 0 or 1.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import (Camera, Category, DatasetManifest, FrameRecord, Split,
                      load_frame_arrays)
from .errors import DataError, ManifestError, ValidationError
from .geometry import SoilingClass
from .nn.layers import IMAGE, TILE, ModelConfig, SoilingNet
from .nn.train import TrainConfig, fit, predict

log = logging.getLogger(__name__)

UNDEFINED = "undefined"
CATEGORY_NAMES = [c.name.lower() for c in Category]


def _vectors(v, what: str) -> np.ndarray:
    a = np.asarray(v)
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValidationError(f"{what} must be class vectors of length 2, got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise ValidationError(f"{what} must be binary")
    return a.astype(np.int64)


def _pair_up(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    p, g = _vectors(preds, "predictions"), _vectors(gts, "ground truth")
    if len(p) != len(g):
        raise ValidationError(f"{len(p)} predictions for {len(g)} ground-truth vectors")
    if len(p) == 0:
        raise ValidationError("cannot evaluate an empty set")
    return p, g


def hamming_error(c_gt, c) -> int:
    """Number of differing components between two class vectors."""
    a, b = _vectors(c_gt, "ground truth"), _vectors(c, "prediction")
    if len(a) != 1 or len(b) != 1:
        raise ValidationError("hamming_error compares a single pair of vectors")
    return int((a != b).sum())


def mean_hamming(preds, gts) -> float:
    p, g = _pair_up(preds, gts)
    return float((p != g).sum()) / len(p)


@dataclass(frozen=True)
class Ratio:
    num: int
    den: int

    @property
    def defined(self) -> bool:
        return self.den > 0

    @property
    def value(self) -> float | None:
        return self.num / self.den if self.den else None

    def __str__(self) -> str:
        return UNDEFINED if self.value is None else f"{self.value:.4f}"


@dataclass(frozen=True, eq=False)
class ConfusionMatrix4:
    """Raw 4x4 counts indexed (ground truth, prediction) in Category order."""

    raw: np.ndarray

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix4) and np.array_equal(self.raw, other.raw)

    @property
    def support(self) -> np.ndarray:
        return self.raw.sum(axis=1)

    @property
    def zero_rows(self) -> np.ndarray:
        return self.support == 0

    @property
    def normalized(self) -> np.ndarray:
        """Row-normalized view; rows without support stay all-zero (see ``zero_rows``)."""
        s = self.support.astype(np.float64)[:, None]
        return np.divide(self.raw, s, out=np.zeros((4, 4)), where=s > 0)

    @property
    def total(self) -> int:
        return int(self.raw.sum())

    def diagonal(self) -> np.ndarray:
        return np.diag(self.normalized)


def confusion_4way(preds, gts) -> ConfusionMatrix4:
    p, g = _pair_up(preds, gts)
    # Category index from [opaque, transparent]: transparent=1, opaque=2, both=3
    pi = p[:, 0] * 2 + p[:, 1]
    gi = g[:, 0] * 2 + g[:, 1]
    raw = np.zeros((4, 4), dtype=np.int64)
    np.add.at(raw, (gi, pi), 1)
    return ConfusionMatrix4(raw)


# -- tile precision / recall -----------------------------------------------------

@dataclass(frozen=True)
class AnySoiling:
    """A tile is positive if either soiling class is present."""

    token = "any"

    def reduce(self, grids: np.ndarray) -> np.ndarray:
        return grids.max(axis=1)


@dataclass(frozen=True)
class PerClass:
    """Only one soiling class counts as positive."""

    soiling_class: SoilingClass

    @property
    def token(self) -> str:
        return SoilingClass(self.soiling_class).token

    def reduce(self, grids: np.ndarray) -> np.ndarray:
        return grids[:, int(self.soiling_class)]


def parse_positive(token: str):
    if token == AnySoiling.token:
        return AnySoiling()
    return PerClass(SoilingClass.from_token(token))


@dataclass(frozen=True)
class PRCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> Ratio:
        return Ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> Ratio:
        return Ratio(self.tp, self.tp + self.fn)

    @property
    def support(self) -> int:
        return self.tp + self.fn

    def __add__(self, other: "PRCounts") -> "PRCounts":
        return PRCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                        self.tn + other.tn)


@dataclass(frozen=True)
class PRReport:
    """Tile-level counts per camera plus ``"all"`` for the pooled set."""

    positive: str
    per_camera: dict[str, PRCounts]


def tile_pr(pred_grids, gt_grids, cameras: Sequence | None = None,
            positive=AnySoiling()) -> PRReport:
    """Precision and recall over all tiles of all frames.

    Grids are (N, 2, Gh, Gw) binary arrays (or sequences of (2, Gh, Gw)).
    ``cameras`` labels each frame; without it everything is pooled under "all".
    """
    p = np.asarray(pred_grids)
    g = np.asarray(gt_grids)
    if p.shape != g.shape:
        raise ValidationError(f"prediction grids {p.shape} do not match ground truth {g.shape}")
    if p.ndim != 4 or p.shape[1] != 2:
        raise ValidationError(f"tile grids must have shape (N, 2, Gh, Gw), got {p.shape}")
    if len(p) == 0:
        raise ValidationError("cannot evaluate an empty set")
    pp = positive.reduce(p).astype(bool)
    gp = positive.reduce(g).astype(bool)
    cams = ["all"] * len(p) if cameras is None else [Camera(c).value for c in cameras]
    if len(cams) != len(p):
        raise ValidationError(f"{len(cams)} camera labels for {len(p)} frames")
    per = {}
    for cam in sorted(set(cams), key=_camera_order):
        sel = np.array([c == cam for c in cams])
        a, b = pp[sel], gp[sel]
        per[cam] = PRCounts(int((a & b).sum()), int((a & ~b).sum()),
                            int((~a & b).sum()), int((~a & ~b).sum()))
    if cameras is not None:
        per["all"] = sum(per.values(), PRCounts(0, 0, 0, 0))
    return PRReport(positive.token, per)


def _camera_order(name: str) -> int:
    names = [c.value for c in Camera] + ["all"]
    return names.index(name)


@dataclass(frozen=True)
class RateReport:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def tpr(self) -> Ratio:
        return Ratio(self.tp, self.tp + self.fn)

    @property
    def fpr(self) -> Ratio:
        return Ratio(self.fp, self.fp + self.tn)


def image_tpr_fpr(preds, gts) -> RateReport:
    """Image-level rates; a frame is positive if any soiling is present."""
    p, g = _pair_up(preds, gts)
    a, b = p.any(axis=1), g.any(axis=1)
    return RateReport(int((a & b).sum()), int((a & ~b).sum()),
                      int((~a & b).sum()), int((~a & ~b).sum()))


# -- report bundle -----------------------------------------------------------------

@dataclass(eq=False)
class EvalReport:
    confusion: ConfusionMatrix4
    hamming_total: int
    rates: RateReport
    tile_pr: PRReport | None = None
    info: dict[str, str] = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.confusion.total

    @property
    def mean_hamming(self) -> float:
        return self.hamming_total / self.n_frames

    def __eq__(self, other):
        return (isinstance(other, EvalReport) and self.confusion == other.confusion
                and self.hamming_total == other.hamming_total and self.rates == other.rates
                and self.tile_pr == other.tile_pr and self.info == other.info)


def evaluate(image_preds, image_gts, tile_preds=None, tile_gts=None, cameras=None,
             positive=AnySoiling(), info: dict | None = None) -> EvalReport:
    p, g = _pair_up(image_preds, image_gts)
    pr = None
    if tile_preds is not None:
        pr = tile_pr(tile_preds, tile_gts, cameras, positive)
    return EvalReport(confusion_4way(p, g), int((p != g).sum()), image_tpr_fpr(p, g), pr,
                      dict(info or {}))


def _fmt_ratio(r: Ratio) -> str:
    return UNDEFINED if r.value is None else repr(r.value)


def write_report(report: EvalReport, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["gt\\pred"] + CATEGORY_NAMES
    with open(out / "confusion_raw.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for name, row in zip(CATEGORY_NAMES, report.confusion.raw):
            w.writerow([name] + [int(v) for v in row])
    norm = report.confusion.normalized
    with open(out / "confusion_norm.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header + ["zero_support"])
        for i, name in enumerate(CATEGORY_NAMES):
            w.writerow([name] + [repr(float(v)) for v in norm[i]]
                       + [int(report.confusion.zero_rows[i])])
    with open(out / "rates.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value", "numerator", "denominator"])
        for name, r in (("tpr", report.rates.tpr), ("fpr", report.rates.fpr),
                        ("mean_hamming", Ratio(report.hamming_total, report.n_frames))):
            w.writerow([name, _fmt_ratio(r), r.num, r.den])
    if report.tile_pr is not None:
        with open(out / "tile_pr.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["camera", "positive", "precision", "recall", "tp", "fp", "fn", "tn"])
            for cam, c in report.tile_pr.per_camera.items():
                w.writerow([cam, report.tile_pr.positive, _fmt_ratio(c.precision),
                            _fmt_ratio(c.recall), c.tp, c.fp, c.fn, c.tn])
    (out / "summary.txt").write_text(format_summary(report))
    return out


def format_summary(report: EvalReport) -> str:
    lines = [f"{k}: {v}" for k, v in sorted(report.info.items())]
    lines.append(f"frames: {report.n_frames}")
    lines.append(f"mean hamming: {report.mean_hamming:.4f}")
    lines.append(f"image TPR: {report.rates.tpr}  FPR: {report.rates.fpr}")
    lines.append("")
    lines.append("normalized confusion (rows: ground truth)")
    lines.append(f"{'':>12}" + "".join(f"{n:>12}" for n in CATEGORY_NAMES))
    for i, name in enumerate(CATEGORY_NAMES):
        if report.confusion.zero_rows[i]:
            cells = f"{'(no support)':>12}"
        else:
            cells = "".join(f"{v:>12.3f}" for v in report.confusion.normalized[i])
        lines.append(f"{name:>12}{cells}")
    lines.append("")
    lines.append("raw confusion")
    for name, row in zip(CATEGORY_NAMES, report.confusion.raw):
        lines.append(f"{name:>12}" + "".join(f"{int(v):>12d}" for v in row))
    if report.tile_pr is not None:
        lines.append("")
        lines.append(f"tile precision / recall (positive: {report.tile_pr.positive})")
        for cam, c in report.tile_pr.per_camera.items():
            lines.append(f"{cam:>12}  precision {c.precision}  recall {c.recall}  "
                         f"support {c.support}")
    return "\n".join(lines) + "\n"


def _read_csv(path: Path) -> list[list[str]]:
    try:
        with open(path, newline="") as f:
            return list(csv.reader(f))
    except FileNotFoundError:
        raise DataError(f"report file {path} is missing") from None


def read_report(report_dir: str | os.PathLike) -> EvalReport:
    """Parse a report bundle back into an :class:`EvalReport`."""
    d = Path(report_dir)
    rows = _read_csv(d / "confusion_raw.csv")
    try:
        if [r[0] for r in rows[1:]] != CATEGORY_NAMES:
            raise ValueError("unexpected row labels")
        raw = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
        rates = {r[0]: (int(r[2]), int(r[3])) for r in _read_csv(d / "rates.csv")[1:]}
        tp, pos = rates["tpr"]
        fp, neg = rates["fpr"]
        ham, _ = rates["mean_hamming"]
        rate = RateReport(tp, fp, pos - tp, neg - fp)
        pr = None
        if (d / "tile_pr.csv").exists():
            per, positive = {}, None
            for r in _read_csv(d / "tile_pr.csv")[1:]:
                positive = r[1]
                per[r[0]] = PRCounts(*(int(v) for v in r[4:8]))
            pr = PRReport(positive, per)
    except (ValueError, IndexError, KeyError) as exc:
        raise DataError(f"malformed report in {d}: {exc}") from exc
    if raw.shape != (4, 4):
        raise DataError(f"malformed report in {d}: confusion matrix has shape {raw.shape}")
    info = {}
    for line in (d / "summary.txt").read_text().splitlines():
        if line.startswith("frames:"):
            break
        key, _, value = line.partition(": ")
        info[key] = value
    return EvalReport(ConfusionMatrix4(raw), ham, rate, pr, info)


def read_norm_confusion(report_dir: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    rows = _read_csv(Path(report_dir) / "confusion_norm.csv")[1:]
    norm = np.array([[float(v) for v in r[1:5]] for r in rows])
    flags = np.array([r[5] == "1" for r in rows])
    return norm, flags


# -- regimes -------------------------------------------------------------------------

FRONT_REAR = (Camera.FRONT, Camera.REAR)
REGIMES = {
    "1": (FRONT_REAR, FRONT_REAR),
    "2": (FRONT_REAR, tuple(Camera)),
    "3": (tuple(Camera), tuple(Camera)),
}


def parse_cameras(spec: str | Iterable) -> tuple[Camera, ...]:
    """``"all"``, a comma list like ``"front,rear"`` or an iterable of cameras."""
    if isinstance(spec, str):
        if spec.strip() == "all":
            return tuple(Camera)
        spec = [t.strip() for t in spec.split(",") if t.strip()]
    cams = tuple(Camera.parse(c) if isinstance(c, str) else Camera(c) for c in spec)
    if not cams:
        raise ValidationError("camera set is empty")
    return tuple(c for c in Camera if c in cams)


@dataclass
class RegimeSettings:
    tile_size: int = 8
    tau: float = 0.25
    samples_per_side: int = 16
    min_area_frac: float = 0.0
    threshold: float = 0.5
    positive: str = AnySoiling.token


def _cam_names(cams) -> str:
    return ",".join(c.value for c in cams)


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (probs > threshold).astype(np.uint8)


def evaluate_model(model: SoilingNet, records: Sequence[FrameRecord], root,
                   settings: RegimeSettings = RegimeSettings(), info: dict | None = None,
                   label_cache: dict | None = None) -> EvalReport:
    """Image-level predictions feed the confusion matrix and rates; tile head feeds PR."""
    if IMAGE not in model.heads:
        raise ValidationError("evaluation needs a model with an image-level head")
    tile_size = settings.tile_size if TILE in model.heads else None
    data = load_frame_arrays(records, root, tile_size, settings.tau, settings.samples_per_side,
                             settings.min_area_frac, label_cache=label_cache)
    out = predict(model, data.images)
    image_pred = binarize(out[IMAGE], settings.threshold).reshape(len(data), 2)
    tiles = None
    if TILE in out:
        tiles = binarize(out[TILE], settings.threshold)
    return evaluate(image_pred, data.image_labels, tiles, data.tile_labels,
                    [r.camera for r in records] if tiles is not None else None,
                    parse_positive(settings.positive), info)


def run_regime(manifest: DatasetManifest, root, train_cams, test_cams,
               model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int = 0,
               settings: RegimeSettings = RegimeSettings(),
               label_cache: dict | None = None) -> tuple[EvalReport, SoilingNet]:
    """Train on Train ∩ train_cams, evaluate on Test ∩ test_cams."""
    train_cams, test_cams = parse_cameras(train_cams), parse_cameras(test_cams)
    if not manifest.split_assignment:
        raise ManifestError("manifest has no split assignment; run the split step first")
    train_recs = manifest.select(Split.TRAIN, train_cams)
    test_recs = manifest.select(Split.TEST, test_cams)
    if not train_recs:
        raise ManifestError(f"no training frames for cameras {_cam_names(train_cams)}")
    if not test_recs:
        raise ManifestError(f"no test frames for cameras {_cam_names(test_cams)}")
    model_cfg = dataclasses.replace(model_cfg, seed=seed)
    train_cfg = dataclasses.replace(train_cfg, seed=seed)
    model = SoilingNet(model_cfg)
    tile_size = settings.tile_size if TILE in model.heads else None
    data = load_frame_arrays(train_recs, root, tile_size, settings.tau, settings.samples_per_side,
                             settings.min_area_frac, label_cache=label_cache)
    log.info("regime %s -> %s: %d train / %d test frames", _cam_names(train_cams),
             _cam_names(test_cams), len(train_recs), len(test_recs))
    fit(model, data, train_cfg)
    info = {"train_cameras": _cam_names(train_cams), "test_cameras": _cam_names(test_cams),
            "train_frames": str(len(train_recs)), "seed": str(seed)}
    report = evaluate_model(model, test_recs, root, settings, info, label_cache)
    return report, model
