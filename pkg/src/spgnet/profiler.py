"""Parameter and multiply-accumulate counts by shape propagation.

The model is traced on PyTorch's ``meta`` device: tensors carry shapes but no
storage, so even a 100M-parameter network profiles at 1024x2048 in well under
a second.  One FLOP is one multiply-accumulate of a convolution or linear
layer; normalisation, activations, pooling and interpolation count zero.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn


@dataclass
class LayerRecord:
    name: str
    kind: str
    output_shape: tuple[int, ...]
    params: int
    macs: int


@dataclass
class ProfileReport:
    input_size: tuple[int, int]
    records: list[LayerRecord] = field(default_factory=list)
    params: int = 0

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.records)

    def to_dict(self, per_layer=False) -> dict:
        out = {"input_size": list(self.input_size), "params": self.params, "macs": self.macs}
        if per_layer:
            out["layers"] = [asdict(r) for r in self.records]
        return out

    def table(self, per_layer=False) -> str:
        lines = []
        if per_layer:
            lines.append(f"{'layer':60s} {'kind':8s} {'output':>22s} {'params':>12s} {'MACs':>16s}")
            for r in self.records:
                shape = "x".join(map(str, r.output_shape))
                lines.append(f"{r.name:60s} {r.kind:8s} {shape:>22s} {r.params:12,d} {r.macs:16,d}")
        h, w = self.input_size
        lines.append(f"input {h}x{w}: params {self.params / 1e6:.2f}M, FLOPs (MACs) {self.macs / 1e9:.1f}B")
        return "\n".join(lines)


def count_params(model: nn.Module) -> int:
    """Learnable scalars: weights, biases and normalisation affine terms."""
    return sum(p.numel() for p in model.parameters())


def _conv_macs(module: nn.Conv2d, out: torch.Tensor) -> int:
    k = module.kernel_size[0] * module.kernel_size[1]
    per_position = k * (module.in_channels // module.groups) * module.out_channels
    return per_position * out.shape[0] * out.shape[2] * out.shape[3]


def profile(model: nn.Module, height: int, width: int) -> ProfileReport:
    """Trace ``model`` on a 1x3xHxW meta tensor and record every conv/linear layer."""
    if height < 1 or width < 1:
        raise ValueError(f"illegal input size {height}x{width}")
    meta = copy.deepcopy(model).to("meta").eval()
    report = ProfileReport((height, width), params=count_params(model))
    hooks = []

    def hook(name):
        def record(module, inputs, out):
            if isinstance(module, nn.Conv2d):
                macs, kind = _conv_macs(module, out), "conv"
            else:
                macs, kind = module.in_features * module.out_features * (out.numel() // out.shape[-1]), "linear"
            params = sum(p.numel() for p in module.parameters(recurse=False))
            report.records.append(LayerRecord(name, kind, tuple(out.shape), params, macs))

        return record

    for name, module in meta.named_modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            hooks.append(module.register_forward_hook(hook(name)))
    try:
        with torch.no_grad():
            meta(torch.empty(1, 3, height, width, device="meta"))
    finally:
        for h in hooks:
            h.remove()
    return report


def count_flops(model: nn.Module, height: int, width: int) -> int:
    return profile(model, height, width).macs


def build_meta(plan):
    """Build a model directly on the meta device (no parameter storage)."""
    from spgnet.model import build

    with torch.device("meta"):
        return build(plan)
