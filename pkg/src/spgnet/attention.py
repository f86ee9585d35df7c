"""Semantic prediction guidance between stages, plus SE/GE reweighting baselines."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from spgnet.backbone import conv_bn

VARIANTS = ("sum", "softmax", "sigmoid")


@dataclass
class SPGConfig:
    num_classes: int
    decoder_channels: int
    variant: str = "sigmoid"
    identity_path: bool = True
    supervised: bool = True

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SPG variant {self.variant!r}; choose from {VARIANTS}")
        if self.num_classes < 1 or self.decoder_channels < 1:
            raise ValueError("num_classes and decoder_channels must be positive")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "decoder_channels": self.decoder_channels,
            "variant": self.variant,
            "identity_path": self.identity_path,
            "supervised": self.supervised,
        }


@dataclass
class GuidedAttentionBundle:
    next_input: torch.Tensor
    logits: torch.Tensor
    # None for the sum variant, which has no excitation mask
    mask: torch.Tensor | None


def spatial_softmax(x: torch.Tensor) -> torch.Tensor:
    """Softmax over all H*W positions, separately per sample and channel."""
    n, c, h, w = x.shape
    return torch.softmax(x.reshape(n, c, h * w), dim=-1).reshape(n, c, h, w)


class SPG(nn.Module):
    """Supervise-and-excite link from one stage's decoder output to the next encoder.

    ``cls`` turns the decoder feature into per-class logits, ``mask`` maps the
    logits back to a D-channel attention that gates ``transform(x_d)``.  The sum
    variant instead adds ``mask(logits)`` to ``x_d`` without gating.
    """

    def __init__(self, config: SPGConfig):
        super().__init__()
        self.config = config
        d, c = config.decoder_channels, config.num_classes
        self.cls = nn.Conv2d(d, c, 1)
        self.mask = nn.Conv2d(c, d, 1)
        self.transform = nn.Conv2d(d, d, 1, bias=False) if config.variant != "sum" else None
        self.out = conv_bn(d, d, 1)

    def forward(self, x_d: torch.Tensor) -> GuidedAttentionBundle:
        if x_d.shape[1] != self.config.decoder_channels:
            raise ValueError(f"SPG expects {self.config.decoder_channels} channels, got {x_d.shape[1]}")
        logits = self.cls(x_d)
        pre = self.mask(logits)
        if self.config.variant == "sum":
            return GuidedAttentionBundle(self.out(x_d + pre), logits, None)
        mask = torch.sigmoid(pre) if self.config.variant == "sigmoid" else spatial_softmax(pre)
        excited = mask * self.transform(x_d)
        if self.config.identity_path:
            excited = x_d + excited
        return GuidedAttentionBundle(self.out(excited), logits, mask)


def check_bundle(bundle: GuidedAttentionBundle, x_d: torch.Tensor, variant: str, atol: float = 1e-5):
    """Raise AssertionError if ``bundle`` violates the mask contract of ``variant``."""
    if bundle.next_input.shape != x_d.shape:
        raise AssertionError(f"next_input {tuple(bundle.next_input.shape)} != input {tuple(x_d.shape)}")
    if variant == "sum":
        return
    m = bundle.mask.detach()
    if m.shape != x_d.shape:
        raise AssertionError(f"mask {tuple(m.shape)} != input {tuple(x_d.shape)}")
    if variant == "sigmoid" and not bool(((m > 0) & (m < 1)).all()):
        raise AssertionError("sigmoid mask leaves the open interval (0, 1)")
    if variant == "softmax":
        sums = m.sum(dim=(2, 3))
        if not torch.allclose(sums, torch.ones_like(sums), atol=atol, rtol=0):
            raise AssertionError(f"softmax mask sums deviate from 1 by {float((sums - 1).abs().max()):.3g}")


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction {reduction} must divide {channels} channels")
        self.reduce = nn.Conv2d(channels, channels // reduction, 1)
        self.expand = nn.Conv2d(channels // reduction, channels, 1)

    def gate(self, x):
        s = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.expand(F.relu(self.reduce(s))))

    def forward(self, x):
        return self.gate(x) * x


class GatherExcite(nn.Module):
    """Parameter-free gather-excite: box-average, nearest upsample, sigmoid gate.

    ``extent=None`` gathers over the whole map.
    """

    def __init__(self, extent: int | None = None):
        super().__init__()
        if extent is not None and extent < 2:
            raise ValueError("gather extent must be at least 2")
        self.extent = extent

    def gate(self, x):
        if self.extent is None:
            return torch.sigmoid(x.mean(dim=(2, 3), keepdim=True))
        if self.extent > min(x.shape[-2:]):
            raise ValueError(f"gather extent {self.extent} exceeds map size {tuple(x.shape[-2:])}")
        pooled = F.avg_pool2d(x, self.extent, self.extent, ceil_mode=True)
        return torch.sigmoid(F.interpolate(pooled, size=x.shape[-2:], mode="nearest"))

    def forward(self, x):
        return self.gate(x) * x


class Passthrough(nn.Module):
    """Unsupervised link: optional SE/GE reweighting then the output 1x1 convolution."""

    def __init__(self, channels, kind="plain", reduction=16, extent=None):
        super().__init__()
        if kind == "plain":
            self.reweight = nn.Identity()
        elif kind == "se":
            self.reweight = SqueezeExcite(channels, reduction)
        elif kind == "ge":
            self.reweight = GatherExcite(extent)
        else:
            raise ValueError(f"unknown link kind {kind!r}")
        self.out = conv_bn(channels, channels, 1)

    def forward(self, x_d):
        return self.out(self.reweight(x_d))


def se_reweight(x_d, reduction=16, module: SqueezeExcite | None = None):
    module = module or SqueezeExcite(x_d.shape[1], reduction).to(x_d)
    return module(x_d)


def ge_reweight(x_d, extent=None):
    return GatherExcite(extent)(x_d)
