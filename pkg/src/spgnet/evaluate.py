"""Inference strategies (GAP / AP / TILED), multi-scale + flip fusion and mIoU."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from spgnet.backbone import PoolingStrategy
from spgnet.datapipe import IGNORE_LABEL, IMAGENET_MEAN, IMAGENET_STD, normalize


@dataclass
class EvalStrategy:
    kind: str = "gap"
    crop: int = 769
    overlap_fraction: float = 1 / 3
    scales: list[float] = field(default_factory=lambda: [1.0])
    flip: bool = False

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("gap", "tiled", "ap"):
            raise ValueError(f"unknown strategy {self.kind!r}")
        if not 0 < self.overlap_fraction < 1:
            raise ValueError("overlap_fraction must lie in (0, 1)")
        if self.crop < 1:
            raise ValueError("crop must be positive")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be a nonempty list of positive numbers")
        self.scales = [float(s) for s in self.scales]

    @property
    def stride(self) -> int:
        # rounded first so that e.g. 3 * (2/3) does not ceil to 3
        return max(1, math.ceil(round(self.crop * (1 - self.overlap_fraction), 6)))

    def to_dict(self) -> dict:
        return dict(vars(self))


def tile_origins(extent: int, crop: int, stride: int) -> list[int]:
    """Window starts covering ``[0, extent)``; the last window is shifted inward."""
    if not 1 <= stride <= crop:
        raise ValueError(f"stride {stride} must lie in [1, crop={crop}] for the windows to cover the image")
    if extent <= crop:
        return [0]
    n = math.ceil((extent - crop) / stride) + 1
    return [min(i * stride, extent - crop) for i in range(n)]


def tiles(height, width, strategy: EvalStrategy) -> list[tuple[int, int]]:
    rows = tile_origins(height, strategy.crop, strategy.stride)
    cols = tile_origins(width, strategy.crop, strategy.stride)
    return [(y, x) for y in rows for x in cols]


def _probabilities(model, image, pooling):
    previous = model.pooling
    model.set_pooling(pooling)
    try:
        return torch.softmax(model(image).final_prediction, dim=1)
    finally:
        model.set_pooling(previous)


@torch.no_grad()
def predict(model, image: torch.Tensor, strategy: EvalStrategy) -> torch.Tensor:
    """Per-pixel class probabilities (N x C x H x W) for a normalised image batch."""
    if image.dim() == 3:
        image = image[None]
    if strategy.kind == "gap":
        return _probabilities(model, image, PoolingStrategy("gap"))
    if strategy.kind == "ap":
        return _probabilities(model, image, PoolingStrategy("ap", strategy.crop))
    n, _, h, w = image.shape
    c = strategy.crop
    ph, pw = max(c - h, 0), max(c - w, 0)
    if ph or pw:
        image = F.pad(image, (0, pw, 0, ph))
    hh, ww = image.shape[-2:]
    total = counts = None
    for y, x in tiles(hh, ww, strategy):
        p = _probabilities(model, image[:, :, y : y + c, x : x + c], PoolingStrategy("gap"))
        if total is None:
            total = image.new_zeros((n, p.shape[1], hh, ww))
            counts = image.new_zeros((1, 1, hh, ww))
        total[:, :, y : y + c, x : x + c] += p
        counts[:, :, y : y + c, x : x + c] += 1
    return (total / counts)[:, :, :h, :w]


def _resize(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


@torch.no_grad()
def fuse_multi_scale_flip(model, image: torch.Tensor, strategy: EvalStrategy) -> torch.Tensor:
    """Average probabilities over ``strategy.scales`` (and mirrored inputs if ``flip``)."""
    if image.dim() == 3:
        image = image[None]
    size = image.shape[-2:]
    branches = []
    for s in strategy.scales:
        scaled = _resize(image, (max(1, round(size[0] * s)), max(1, round(size[1] * s))))
        views = [(scaled, False)] + ([(scaled.flip(-1), True)] if strategy.flip else [])
        for view, flipped in views:
            p = predict(model, view, strategy)
            if flipped:
                p = p.flip(-1)
            p = _resize(p, size)
            branches.append(p / p.sum(dim=1, keepdim=True))
    return torch.stack(branches).mean(dim=0)


class ConfusionMatrix:
    """Pixel counts with ground truth along rows and predictions along columns."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt, ignore_label: int = IGNORE_LABEL) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        gt = np.asarray(gt).reshape(-1).astype(np.int64)
        keep = gt != ignore_label
        pred, gt = pred[keep], gt[keep]
        c = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c):
            raise ValueError("label outside [0, num_classes)")
        self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both truth and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> tuple[float, np.ndarray]:
        per_class = self.iou()
        present = ~np.isnan(per_class)
        # fsum is correctly rounded, so the mean does not depend on summation order
        values = per_class[present]
        return (math.fsum(values) / len(values) if len(values) else float("nan")), per_class

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")


def accumulate(conf: ConfusionMatrix, pred, gt, ignore_label: int = IGNORE_LABEL) -> ConfusionMatrix:
    return conf.accumulate(pred, gt, ignore_label)


def miou(conf: ConfusionMatrix):
    return conf.miou()


def evaluate_dataset(model, dataset, strategy: EvalStrategy, mean=IMAGENET_MEAN, std=IMAGENET_STD, class_names=None):
    """Run ``strategy`` over every sample and return a JSON-ready report."""
    model.eval()
    conf = ConfusionMatrix(model.plan.num_classes)
    for i in range(len(dataset)):
        sample = dataset[i]
        probs = fuse_multi_scale_flip(model, normalize(sample.image, mean, std), strategy)
        conf.accumulate(probs.argmax(dim=1)[0].numpy(), sample.labels)
    m, per_class = conf.miou()
    names = class_names or getattr(dataset, "class_names", None) or [str(c) for c in range(conf.num_classes)]
    return {
        "miou": m,
        "pixel_accuracy": conf.pixel_accuracy(),
        "per_class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, per_class)},
        "num_images": len(dataset),
        "strategy": strategy.to_dict(),
    }
