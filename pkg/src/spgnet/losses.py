"""Segmentation objective: ignore-aware cross-entropy, OHEM, multi-stage sum, poly LR."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from spgnet.decoder import upsample_to


@dataclass
class OHEMConfig:
    keep_threshold: float = 0.7
    min_kept: int = 100_000

    def __post_init__(self):
        if not 0 < self.keep_threshold <= 1:
            raise ValueError("keep_threshold must lie in (0, 1]")
        if self.min_kept < 0:
            raise ValueError("min_kept must be nonnegative")


@dataclass
class LossConfig:
    stage_weights: list[float] | None = None
    ignore_label: int = 255
    ohem: OHEMConfig | None = None

    def __post_init__(self):
        if isinstance(self.ohem, dict):
            self.ohem = OHEMConfig(**self.ohem)
        if self.stage_weights is not None and any(w < 0 for w in self.stage_weights):
            raise ValueError("stage weights must be nonnegative")

    def weights(self, num_stages: int) -> list[float]:
        if self.stage_weights is None:
            return [1.0] * num_stages
        if len(self.stage_weights) != num_stages:
            raise ValueError(f"{len(self.stage_weights)} stage weights for {num_stages} stages")
        return list(self.stage_weights)

    def to_dict(self) -> dict:
        return {
            "stage_weights": self.stage_weights,
            "ignore_label": self.ignore_label,
            "ohem": None if self.ohem is None else vars(self.ohem).copy(),
        }


@dataclass
class ScheduleConfig:
    base_lr: float = 0.01
    max_iter: int = 80_000
    power: float = 0.9

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.power <= 1:
            raise ValueError("power must lie in (0, 1]")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


def poly_lr(iteration: int, config: ScheduleConfig) -> float:
    if not 0 <= iteration <= config.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {config.max_iter}]")
    if config.max_iter == 0:
        return config.base_lr
    return config.base_lr * (1 - iteration / config.max_iter) ** config.power


def _check_labels(labels, num_classes, ignore_label):
    bad = (labels != ignore_label) & ((labels < 0) | (labels >= num_classes))
    if bool(bad.any()):
        value = int(labels[bad][0])
        raise ValueError(f"label {value} outside [0, {num_classes}) and not the ignore label {ignore_label}")


def cross_entropy_ignore(logits: torch.Tensor, labels: torch.Tensor, ignore_label: int = 255):
    """Per-pixel loss (zero at ignored pixels) and its mean over supervised pixels.

    ``logits`` is N x C x H x W, ``labels`` N x H x W.  With no supervised pixel
    the mean is an exact zero that still carries (zero) gradient.
    """
    _check_labels(labels, logits.shape[1], ignore_label)
    loss_map = F.cross_entropy(logits, labels.long(), ignore_index=ignore_label, reduction="none")
    valid = labels != ignore_label
    count = int(valid.sum())
    mean = loss_map.sum() / count if count else loss_map.sum() * 0.0
    return loss_map, mean


def ohem_select(prob_truth: torch.Tensor, valid: torch.Tensor, keep_threshold: float, min_kept: int) -> torch.Tensor:
    """Boolean mask of pixels kept by online hard example mining.

    Every valid pixel whose true-class probability is below ``keep_threshold``
    is kept.  If that leaves fewer than ``min_kept`` pixels, the ``min_kept``
    lowest-probability valid pixels are kept instead, earlier pixels (in
    flattened scanline order) winning ties.  ``min_kept`` is clamped to the
    number of valid pixels.
    """
    flat_p = prob_truth.detach().reshape(-1)
    flat_valid = valid.reshape(-1)
    index = torch.nonzero(flat_valid, as_tuple=True)[0]
    p = flat_p[index]
    keep = p < keep_threshold
    k = min(int(min_kept), p.numel())
    if int(keep.sum()) < k:
        order = torch.sort(p, stable=True).indices[:k]
        keep = torch.zeros_like(keep)
        keep[order] = True
    mask = torch.zeros_like(flat_valid)
    mask[index[keep]] = True
    return mask.reshape(valid.shape)


def stage_loss(logits, labels, config: LossConfig):
    if logits.shape[-2:] != labels.shape[-2:]:
        logits = upsample_to(logits, labels.shape[-2:])
    loss_map, mean = cross_entropy_ignore(logits, labels, config.ignore_label)
    if config.ohem is None:
        return mean
    valid = labels != config.ignore_label
    with torch.no_grad():
        target = labels.long().clamp(0, logits.shape[1] - 1)
        prob = torch.softmax(logits, dim=1).gather(1, target.unsqueeze(1)).squeeze(1)
    keep = ohem_select(prob, valid, config.ohem.keep_threshold, config.ohem.min_kept)
    count = int(keep.sum())
    if count == 0:
        return loss_map.sum() * 0.0
    return (loss_map * keep).sum() / count


def multi_stage_loss(per_stage_logits, labels, config: LossConfig = LossConfig()):
    """Weighted sum of per-stage losses; ``None`` entries (unsupervised stages) are skipped.

    Returns ``(total, per_stage)`` where ``per_stage`` holds the unweighted loss
    of each stage (``None`` for skipped stages).
    """
    weights = config.weights(len(per_stage_logits))
    total, per_stage = None, []
    for w, logits in zip(weights, per_stage_logits):
        if logits is None:
            per_stage.append(None)
            continue
        loss = stage_loss(logits, labels, config)
        per_stage.append(loss)
        total = w * loss if total is None else total + w * loss
    if total is None:
        raise ValueError("no supervised stage to compute a loss from")
    return total, per_stage
