"""Training loop: SGD with momentum, poly schedule, multi-stage loss, checkpoints.

Checkpoint archive (``torch.save`` of a dict)::

    format          "spgnet-checkpoint/1"
    plan            NetworkPlan.to_dict()
    plan_digest     NetworkPlan.digest()
    train_config    TrainConfig.to_dict() or None
    iteration       completed optimizer steps
    model           model state_dict (parameters and normalisation buffers)
    optimizer       optimizer state_dict or None
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from spgnet.datapipe import AugmentConfig, batches
from spgnet.losses import LossConfig, OHEMConfig, ScheduleConfig, multi_stage_loss, poly_lr
from spgnet.model import NetworkPlan, SPGNet, build

log = logging.getLogger(__name__)

FORMAT = "spgnet-checkpoint/1"


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration, value):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


class PlanMismatchError(ValueError):
    def __init__(self, expected, found):
        super().__init__(f"checkpoint plan {found} does not match requested plan {expected}")
        self.expected, self.found = expected, found


@dataclass
class TrainConfig:
    batch_size: int = 8
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_iter: int = 80_000
    power: float = 0.9
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.batch_size < 1 or self.base_lr <= 0 or self.max_iter < 0:
            raise ValueError("batch_size and base_lr must be positive, max_iter nonnegative")
        if self.momentum < 0 or self.weight_decay < 0 or self.checkpoint_every < 0:
            raise ValueError("momentum, weight_decay and checkpoint_every must be nonnegative")

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.base_lr, self.max_iter, self.power)

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["augment"] = None if self.augment is None else self.augment.to_dict()
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@contextlib.contextmanager
def deterministic_mode(enabled=True):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.SGD:
    """SGD with weight decay on convolution weights only (not norms or biases)."""
    decay, rest = [], []
    for p in model.parameters():
        (decay if p.ndim == 4 else rest).append(p)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": rest, "weight_decay": 0.0},
    ]
    return torch.optim.SGD(groups, lr=config.base_lr, momentum=config.momentum)


@dataclass
class Checkpoint:
    model: SPGNet
    plan: NetworkPlan
    train_config: TrainConfig | None
    iteration: int
    optimizer_state: dict | None


def save_checkpoint(path, model: SPGNet, iteration: int, config: TrainConfig | None = None, optimizer=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": FORMAT,
        "plan": model.plan.to_dict(),
        "plan_digest": model.plan.digest(),
        "train_config": None if config is None else config.to_dict(),
        "iteration": iteration,
        "model": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
    }
    torch.save(archive, path)
    return path


def load_checkpoint(path, plan: NetworkPlan | None = None) -> Checkpoint:
    """Rebuild the model stored at ``path``.

    If ``plan`` is given, the archive must have been written for an identical
    plan; otherwise :class:`PlanMismatchError` reports both digests.
    """
    archive = torch.load(path, map_location="cpu", weights_only=True)
    if archive.get("format") != FORMAT:
        raise ValueError(f"{path}: not an spgnet checkpoint")
    stored = NetworkPlan.from_dict(archive["plan"])
    if plan is not None and plan.digest() != stored.digest():
        raise PlanMismatchError(plan.digest(), stored.digest())
    model = build(stored)
    model.load_state_dict(archive["model"])
    model.eval()
    cfg = archive.get("train_config")
    return Checkpoint(
        model,
        stored,
        None if cfg is None else TrainConfig.from_dict(cfg),
        int(archive["iteration"]),
        archive.get("optimizer"),
    )


@dataclass
class TrainResult:
    model: SPGNet
    log: list[dict]
    checkpoints: list[Path]
    iteration: int


def _supervised_logits(out):
    return [l if sup else None for l, sup in zip(out.per_stage_logits, out.supervised)]


def train(plan: NetworkPlan, data, config: TrainConfig, out_dir=None, resume: Checkpoint | None = None) -> TrainResult:
    """Train ``plan`` on ``data`` and return the model with its metric log.

    Each iteration records ``iteration``, ``lr``, ``total_loss`` and
    ``stage_losses``; with ``out_dir`` the records are appended to
    ``metrics.jsonl`` and checkpoints are written to ``checkpoints/``
    initially, every ``checkpoint_every`` steps and at completion.
    """
    num_classes = getattr(data, "classes", None) or len(getattr(data, "class_names", [])) or None
    if num_classes is not None and num_classes != plan.num_classes:
        raise ValueError(f"dataset has {num_classes} classes, plan expects {plan.num_classes}")
    out_dir = None if out_dir is None else Path(out_dir)
    schedule = config.schedule
    records, checkpoints = [], []

    with deterministic_mode(config.deterministic):
        torch.manual_seed(config.seed)
        model = build(plan)
        optimizer = make_optimizer(model, config)
        start = 0
        if resume is not None:
            if resume.plan.digest() != plan.digest():
                raise PlanMismatchError(plan.digest(), resume.plan.digest())
            model.load_state_dict(resume.model.state_dict())
            if resume.optimizer_state is not None:
                optimizer.load_state_dict(resume.optimizer_state)
            start = resume.iteration
        rng = np.random.default_rng([config.seed, start])
        stream = batches(data, config.batch_size, rng, config.augment)

        metrics = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics = open(out_dir / "metrics.jsonl", "a" if resume else "w")

        def checkpoint(iteration):
            if out_dir is not None:
                path = out_dir / "checkpoints" / f"iter_{iteration:07d}.pt"
                checkpoints.append(save_checkpoint(path, model, iteration, config, optimizer))

        try:
            if resume is None:
                checkpoint(0)
            model.train()
            for it in range(start, config.max_iter):
                lr = poly_lr(it, schedule)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                images, labels = next(stream)
                out = model(images)
                total, per_stage = multi_stage_loss(_supervised_logits(out), labels, config.loss)
                value = float(total.detach())
                if not math.isfinite(value):
                    if metrics is not None:
                        metrics.write(json.dumps({"iteration": it, "error": "non-finite loss"}) + "\n")
                    raise NonFiniteLossError(it, value)
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                optimizer.step()
                record = {
                    "iteration": it,
                    "lr": lr,
                    "total_loss": value,
                    "stage_losses": [None if l is None else float(l.detach()) for l in per_stage],
                }
                records.append(record)
                if metrics is not None:
                    metrics.write(json.dumps(record) + "\n")
                if it % 100 == 0:
                    log.info("iter %d lr %.5f loss %.4f", it, lr, value)
                done = it + 1
                if config.checkpoint_every and done % config.checkpoint_every == 0 and done != config.max_iter:
                    checkpoint(done)
            if config.max_iter > start:
                checkpoint(config.max_iter)
        finally:
            if metrics is not None:
                metrics.close()
    model.eval()
    return TrainResult(model, records, checkpoints, max(start, config.max_iter))
