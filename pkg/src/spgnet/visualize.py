"""Guided-attention maps: class-conditioned channel selection and heat-map overlays.

For class ``c`` the row ``c`` of the SPG mask convolution (classes x channels)
says how strongly each attention channel responds to that class.  The
``top_k`` strongest channels are combined by a per-pixel l2 norm and min-max
normalised to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from spgnet.datapipe import palette

ALPHA = 0.5
# perceptually uniform; low = dark purple, high = yellow
DEFAULT_COLORMAP = "viridis"


@dataclass
class AttentionQuery:
    class_index: int
    top_k: int = 15


def mask_weights(model, stage: int = 0) -> np.ndarray:
    """Classes x channels weight matrix of stage ``stage``'s SPG mask convolution."""
    conv = model.stages[stage].spg.mask
    return conv.weight.detach()[:, :, 0, 0].T.cpu().numpy()


def top_channel_indices(weights, query: AttentionQuery) -> list[int]:
    """Indices of the ``top_k`` largest entries of row ``class_index``, largest
    first, lower index first among equal weights."""
    weights = np.asarray(weights)
    classes, channels = weights.shape
    if not 0 <= query.class_index < classes:
        raise ValueError(f"class index {query.class_index} outside [0, {classes})")
    if not 1 <= query.top_k <= channels:
        raise ValueError(f"top_k {query.top_k} outside [1, {channels}]")
    row = weights[query.class_index]
    order = np.lexsort((np.arange(channels), -row))
    return [int(i) for i in order[: query.top_k]]


def attention_map(mask, indices) -> np.ndarray:
    """l2 norm over the selected channels of a D x H x W mask, scaled to [0, 1].

    A constant map scales to all zeros.
    """
    if len(indices) == 0:
        raise ValueError("no channels selected")
    mask = np.asarray(mask, dtype=np.float64)
    norm = np.sqrt((mask[list(indices)] ** 2).sum(axis=0))
    lo, hi = norm.min(), norm.max()
    if hi == lo:
        return np.zeros_like(norm)
    return (norm - lo) / (hi - lo)


def _to_uint8(x):
    return np.clip(np.round(x * 255), 0, 255).astype(np.uint8)


def heatmap(map01: np.ndarray, colormap: str = DEFAULT_COLORMAP) -> np.ndarray:
    """H x W in [0, 1] -> H x W x 3 RGB floats via ``colormap``'s 256-entry table."""
    lut = matplotlib.colormaps[colormap](np.linspace(0, 1, 256))[:, :3]
    return lut[_to_uint8(map01)]


def emit_overlay(image, map01, out_path, colormap: str = DEFAULT_COLORMAP) -> tuple[Path, Path]:
    """Write ``out_path`` (heat map blended over ``image``) and ``<stem>_heatmap.png``.

    ``map01`` is bilinearly resized to the image size first.  Returns both paths.
    """
    image = np.asarray(image, dtype=np.float64)
    map01 = np.asarray(map01, dtype=np.float64)
    if map01.min() < 0 or map01.max() > 1:
        raise ValueError("attention map must lie in [0, 1]")
    h, w = image.shape[:2]
    if map01.shape != (h, w):
        t = torch.from_numpy(map01)[None, None]
        map01 = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
        map01 = np.clip(map01, 0, 1)
    colored = heatmap(map01, colormap)
    blended = (1 - ALPHA) * image + ALPHA * colored
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    heat_path = out_path.with_name(out_path.stem + "_heatmap.png")
    Image.fromarray(_to_uint8(blended)).save(out_path, format="PNG")
    Image.fromarray(_to_uint8(colored)).save(heat_path, format="PNG")
    return out_path, heat_path


def colorize(labels: np.ndarray, num_classes: int) -> np.ndarray:
    colors = palette(num_classes)
    out = np.zeros(labels.shape + (3,), dtype=np.float32)
    valid = labels < num_classes
    out[valid] = colors[labels[valid]]
    return out


@torch.no_grad()
def render_attention(model, image: np.ndarray, normalized: torch.Tensor, classes, out_dir, top_k=15, stage=0,
                     colormap: str = DEFAULT_COLORMAP, class_names=None) -> list[Path]:
    """Write the prediction panel and one attention overlay per class in ``classes``."""
    if model.plan.stages[stage].link != "spg" or model.plan.stages[stage].spg.variant == "sum":
        raise ValueError(f"stage {stage + 1} has no guided-attention mask")
    model.eval()
    out = model(normalized[None] if normalized.dim() == 3 else normalized)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred = out.final_prediction.argmax(dim=1)[0].numpy()
    paths = [out_dir / "prediction.png"]
    Image.fromarray(_to_uint8(colorize(pred, model.plan.num_classes))).save(paths[0], format="PNG")
    weights = mask_weights(model, stage)
    mask = out.attention[stage].mask[0].numpy()
    for c in classes:
        idx = top_channel_indices(weights, AttentionQuery(c, top_k))
        name = (class_names[c] if class_names else str(c)).replace(" ", "_")
        target = out_dir / f"attention_{name}.png"
        overlay, heat = emit_overlay(image, attention_map(mask, idx), target, colormap)
        paths += [overlay, heat]
    return paths
