"""Decoders recovering stride 4 from the encoder pyramid.

``Decoder`` chains upsample modules (residual transform of the encoder
feature, bilinear upsampling of the coarser decoder feature, residual fusion)
from stride 32 down to stride 4.  ``FPNDecoder`` is the lateral-1x1 /
nearest-neighbour baseline.  Both end in the same 3x3 + 1x1 refinement at
stride 4 and predict from that single map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from spgnet.backbone import conv_bn


@dataclass
class DecoderSpec:
    channels: int = 128
    style: str = "upsample"

    def __post_init__(self):
        if self.channels <= 0 or self.channels % 4:
            raise ValueError(f"decoder channels must be a positive multiple of 4, got {self.channels}")
        if self.style not in ("upsample", "fpn"):
            raise ValueError(f"unknown decoder style {self.style!r}")

    def to_dict(self) -> dict:
        return {"channels": self.channels, "style": self.style}


class ResidualBlock(nn.Module):
    """ResNet bottleneck mapping ``cin`` to ``cout`` with ``cout // 4`` mid channels."""

    def __init__(self, cin, cout):
        super().__init__()
        mid = cout // 4
        self.reduce = conv_bn(cin, mid, 1)
        self.conv = conv_bn(mid, mid, 3)
        self.expand = conv_bn(mid, cout, 1, relu=False)
        self.shortcut = None if cin == cout else conv_bn(cin, cout, 1, relu=False)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.expand(self.conv(self.reduce(x))) + identity)


def upsample_to(x: torch.Tensor, size, mode: str = "bilinear") -> torch.Tensor:
    """Resize ``x`` to ``size``; a 1x1 map is broadcast instead of interpolated."""
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    if x.shape[-2:] == (1, 1):
        return x.expand(*x.shape[:2], *size)
    if mode == "nearest":
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _check_previous(encoder_feat, previous, channels):
    if previous.shape[1] != channels:
        raise ValueError(f"previous feature has {previous.shape[1]} channels, expected {channels}")
    eh, ew = encoder_feat.shape[-2:]
    ph, pw = previous.shape[-2:]
    allowed = {(1, 1), (eh, ew), ((eh + 1) // 2, (ew + 1) // 2)}
    if (ph, pw) not in allowed:
        raise ValueError(f"previous feature {ph}x{pw} is not half of, equal to, or broadcastable over {eh}x{ew}")


class UpsampleModule(nn.Module):
    """``fuse(transform(encoder_feat) + upsample(previous))``.

    ``previous`` may be the coarser decoder output (half the size), the pooled
    context (1x1, broadcast) or an AP context of the same size.  With
    ``previous=None`` only the transformed encoder feature is fused.
    """

    def __init__(self, encoder_channels, channels):
        super().__init__()
        self.channels = channels
        self.transform = ResidualBlock(encoder_channels, channels)
        self.fuse = ResidualBlock(channels, channels)

    def forward(self, encoder_feat, previous=None):
        x = self.transform(encoder_feat)
        if previous is not None:
            _check_previous(encoder_feat, previous, self.channels)
            x = x + upsample_to(previous, encoder_feat.shape[-2:])
        return self.fuse(x)


class Refine(nn.Sequential):
    def __init__(self, channels):
        super().__init__(conv_bn(channels, channels, 3), conv_bn(channels, channels, 1))


class Decoder(nn.Module):
    """Upsample-module decoder; returns the stride-4 map and the per-level outputs."""

    def __init__(self, encoder_channels, spec: DecoderSpec):
        super().__init__()
        d = spec.channels
        for stride, c in zip((4, 8, 16, 32), encoder_channels):
            self.add_module(f"level{stride}", UpsampleModule(c, d))
        self.head = Refine(d)

    @property
    def levels(self) -> list[UpsampleModule]:
        """Upsample modules in application order, stride 32 first."""
        return [self.level32, self.level16, self.level8, self.level4]

    def forward(self, pyramid, context=None):
        x = context
        outputs = []
        for module, feat in zip(self.levels, reversed(pyramid)):
            x = module(feat, x)
            outputs.append(x)
        # outputs are listed fine to coarse, matching the pyramid
        return self.head(x), outputs[::-1]


class FPNDecoder(nn.Module):
    """Lateral 1x1 convolutions merged top-down by nearest-neighbour upsampling.

    Prediction uses the finest merged map only, so a single 3x3 smoothing
    convolution is applied there.  No global context is consumed.
    """

    def __init__(self, encoder_channels, spec: DecoderSpec):
        super().__init__()
        d = spec.channels
        self.laterals = nn.ModuleList([conv_bn(c, d, 1) for c in encoder_channels])
        self.smooth = conv_bn(d, d, 3)
        self.head = Refine(d)

    def forward(self, pyramid, context=None):
        merged = [lat(f) for lat, f in zip(self.laterals, pyramid)]
        for i in range(len(merged) - 2, -1, -1):
            merged[i] = merged[i] + upsample_to(merged[i + 1], merged[i].shape[-2:], mode="nearest")
        return self.head(self.smooth(merged[0])), merged


def make_decoder(encoder_channels, spec: DecoderSpec) -> nn.Module:
    return Decoder(encoder_channels, spec) if spec.style == "upsample" else FPNDecoder(encoder_channels, spec)
