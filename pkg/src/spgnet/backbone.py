"""ResNet encoder producing a stride 4/8/16/32 feature pyramid plus global context.

All convolutions use symmetric zero padding of ``k // 2`` so that a stride-``s``
layer maps a side of length ``n`` to ``ceil(n / s)``.  A 769 pixel crop therefore
gives 193/97/49/25 at strides 4/8/16/32.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

STRIDES = (4, 8, 16, 32)
STEM_WIDTH = 64

# (block kind, blocks per stage)
DEPTHS = {
    18: ("basic", (2, 2, 2, 2)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
    152: ("bottleneck", (3, 8, 36, 3)),
}
EXPANSION = {"basic": 1, "bottleneck": 4}


def _scaled(channels: int, multiplier: Fraction) -> int:
    value = channels * multiplier
    if value.denominator != 1 or value < 1:
        raise ValueError(f"width multiplier {multiplier} turns {channels} channels into {value}")
    return int(value)


@dataclass
class EncoderSpec:
    """ResNet variant and (optionally shrunk) channel widths.

    ``stage_channels`` defaults to the canonical widths of the chosen depth
    (64..512 for basic blocks, 256..2048 for bottlenecks) and is given before
    scaling by ``width_multiplier``.
    """

    depth: int = 18
    stage_channels: Sequence[int] | None = None
    width_multiplier: Fraction | float | str = 1

    def __post_init__(self):
        if self.depth not in DEPTHS:
            raise ValueError(f"unsupported ResNet depth {self.depth}; choose from {sorted(DEPTHS)}")
        self.width_multiplier = Fraction(self.width_multiplier).limit_denominator(1024)
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        if self.stage_channels is None:
            base = [STEM_WIDTH * 2**i * EXPANSION[self.kind] for i in range(4)]
        else:
            base = [int(c) for c in self.stage_channels]
        if len(base) != 4 or any(c <= 0 for c in base):
            raise ValueError("stage_channels must hold 4 positive integers")
        if any(b < a for a, b in zip(base, base[1:])):
            raise ValueError("stage_channels must be nondecreasing")
        self.stage_channels = tuple(base)
        for c in self.channels:
            if c % EXPANSION[self.kind]:
                raise ValueError(f"{c} channels not divisible by the {self.kind} expansion")

    @property
    def kind(self) -> str:
        return DEPTHS[self.depth][0]

    @property
    def blocks(self) -> tuple[int, ...]:
        return DEPTHS[self.depth][1]

    @property
    def channels(self) -> list[int]:
        """Output channels at strides 4/8/16/32 after width scaling."""
        return [_scaled(c, self.width_multiplier) for c in self.stage_channels]

    @property
    def stem_channels(self) -> int:
        return _scaled(STEM_WIDTH, self.width_multiplier)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "stage_channels": list(self.stage_channels),
            "width_multiplier": str(self.width_multiplier),
        }


@dataclass(frozen=True)
class PoolingStrategy:
    """How the image-level context feature is pooled from the stride-32 map.

    ``gap`` averages over the whole map.  ``ap`` slides an average pool whose
    side equals the stride-32 extent of a training crop, ``ceil(crop / 32)``,
    so inference sees the same context window as training did.
    """

    kind: str = "gap"
    crop_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("gap", "ap"):
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if self.kind == "ap" and (self.crop_size is None or self.crop_size < 1):
            raise ValueError("AP pooling needs a positive crop_size")

    def kernel(self, stride: int = 32) -> int:
        if self.kind != "ap":
            raise ValueError("only AP pooling has a kernel")
        if self.crop_size < stride:
            raise ValueError(f"AP kernel crop_size/stride = {self.crop_size}/{stride} is below 1")
        return math.ceil(self.crop_size / stride)


def conv_bn(cin, cout, kernel=1, stride=1, relu=True):
    layers = OrderedDict(
        conv=nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        bn=nn.BatchNorm2d(cout),
    )
    if relu:
        layers["relu"] = nn.ReLU(inplace=True)
    return nn.Sequential(layers)


class BasicBlock(nn.Module):
    def __init__(self, cin, planes, stride=1):
        super().__init__()
        cout = planes
        self.conv1 = nn.Conv2d(cin, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = conv_bn(cin, cout, 1, stride, relu=False) if stride != 1 or cin != cout else None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class Bottleneck(nn.Module):
    # stride sits on the 3x3 conv, as in torchvision's ResNet v1.5
    def __init__(self, cin, planes, stride=1):
        super().__init__()
        cout = planes * 4
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.downsample = conv_bn(cin, cout, 1, stride, relu=False) if stride != 1 or cin != cout else None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class Stem(nn.Module):
    """7x7/2 convolution and 3x3/2 max pooling: image -> stride 4."""

    min_size = 8

    def __init__(self, cout, cin=3):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 7, 2, 3, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.pool = nn.MaxPool2d(3, 2, 1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.conv.in_channels:
            raise ValueError(f"stem expects N x {self.conv.in_channels} x H x W input, got {tuple(x.shape)}")
        if min(x.shape[-2:]) < self.min_size:
            raise ValueError(f"input {tuple(x.shape[-2:])} is smaller than {self.min_size}x{self.min_size}")
        return self.pool(F.relu(self.bn(self.conv(x))))


class ResNetEncoder(nn.Module):
    """Residual stages ``stage1..stage4`` behind an optional image stem.

    Later stages of a stacked network drop the stem and are fed a stride-4
    feature by the caller, which also drives the stages one at a time when
    cross-stage aggregation is in use.
    """

    def __init__(self, spec: EncoderSpec, stem: bool = True):
        super().__init__()
        self.spec = spec
        self.stem = Stem(spec.stem_channels) if stem else None
        block = BasicBlock if spec.kind == "basic" else Bottleneck
        cin = spec.stem_channels
        for i, (cout, n) in enumerate(zip(spec.channels, spec.blocks)):
            planes = cout // EXPANSION[spec.kind]
            blocks = OrderedDict()
            for k in range(n):
                stride = 2 if (k == 0 and i > 0) else 1
                blocks[f"block{k + 1}"] = block(cin, planes, stride)
                cin = cout
            self.add_module(f"stage{i + 1}", nn.Sequential(blocks))

    @property
    def stages(self) -> list[nn.Module]:
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def forward(self, x):
        size = x.shape[-2:]
        if self.stem is not None:
            x = self.stem(x)
        pyramid = []
        for stage in self.stages:
            x = stage(x)
            pyramid.append(x)
        if self.stem is not None:
            check_pyramid(pyramid, size)
        return pyramid


def feature_size(size, stride):
    return tuple(math.ceil(s / stride) for s in size)


def check_pyramid(pyramid, image_size):
    """Assert that level ``i`` sits at stride ``4 * 2**i`` of ``image_size``."""
    if len(pyramid) != len(STRIDES):
        raise AssertionError(f"expected {len(STRIDES)} pyramid levels, got {len(pyramid)}")
    for level, stride in zip(pyramid, STRIDES):
        expected = feature_size(image_size, stride)
        if tuple(level.shape[-2:]) != expected:
            raise AssertionError(f"stride-{stride} level has size {tuple(level.shape[-2:])}, expected {expected}")


def sliding_average(x: torch.Tensor, kernel: int) -> torch.Tensor:
    """Stride-1 box average of side ``kernel`` that keeps the input size.

    The kernel is clamped to the map size and only fully in-bounds windows
    are averaged; positions near the border reuse the nearest such window
    (replicate padding of the valid pooling result).  When the kernel covers
    the whole map every position therefore equals the global average.
    """
    h, w = x.shape[-2:]
    kh, kw = min(kernel, h), min(kernel, w)
    pooled = F.avg_pool2d(x, (kh, kw), stride=1)
    pad = ((kw - 1) // 2, kw - 1 - (kw - 1) // 2, (kh - 1) // 2, kh - 1 - (kh - 1) // 2)
    if any(pad):
        pooled = F.pad(pooled, pad, mode="replicate")
    return pooled


class GlobalContext(nn.Module):
    """Pooled image-level feature projected to the decoder width."""

    def __init__(self, cin, cout):
        super().__init__()
        self.proj = conv_bn(cin, cout, 1)

    def pool(self, x, strategy: PoolingStrategy):
        if strategy.kind == "gap":
            return x.mean(dim=(2, 3), keepdim=True)
        return sliding_average(x, strategy.kernel(32))

    def forward(self, x, strategy: PoolingStrategy = PoolingStrategy()):
        return self.proj(self.pool(x, strategy))


def load_weight_archive(module: nn.Module, archive: Mapping[str, torch.Tensor] | str, prefix: str = "") -> list[str]:
    """Copy tensors from a flat ``name -> tensor`` archive into ``module``.

    Keys follow the module's own ``state_dict`` names (``stem.conv.weight``,
    ``stage2.block1.conv1.weight``, ``context.proj.conv.weight``, ...), optionally
    under ``prefix``.  Returns the parameter names that the archive did not cover.
    """
    if isinstance(archive, str):
        archive = torch.load(archive, map_location="cpu", weights_only=True)
    state = module.state_dict()
    missing = []
    for name, tensor in state.items():
        key = prefix + name
        if key not in archive:
            missing.append(name)
            continue
        if archive[key].shape != tensor.shape:
            raise ValueError(f"{key}: archive shape {tuple(archive[key].shape)} != {tuple(tensor.shape)}")
        state[name] = archive[key]
    module.load_state_dict(state)
    return missing
