"""Datasets, augmentation and a synthetic shapes dataset for desk-scale runs."""

from __future__ import annotations

import colorsys
import csv
import io
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IGNORE_LABEL = 255
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    labels: np.ndarray  # H x W int64, class ids or IGNORE_LABEL
    identifier: str

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape:
            raise ValueError(f"{self.identifier}: image {self.image.shape[:2]} and labels {self.labels.shape} differ")


@dataclass
class AugmentConfig:
    scale_min: float = 0.5
    scale_max: float = 2.0
    scale_step: float = 0.25
    crop: int = 769
    hflip_prob: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if not self.scales():
            raise ValueError("empty scale grid")
        self.mean, self.std = tuple(self.mean), tuple(self.std)

    def scales(self) -> list[float]:
        if self.scale_step <= 0:
            return [self.scale_min] if self.scale_min == self.scale_max else []
        n = int(np.floor((self.scale_max - self.scale_min) / self.scale_step + 1e-9)) + 1
        return [round(self.scale_min + i * self.scale_step, 10) for i in range(max(n, 0))]

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d


# --- label tables -----------------------------------------------------------


def read_label_table(path=None) -> tuple[np.ndarray, list[str]]:
    """Load a ``id,name,train_id`` CSV into a 256-entry lookup and class names.

    Without ``path`` the bundled Cityscapes table is used.
    """
    if path is None:
        text = resources.files("spgnet").joinpath("resources/cityscapes_labels.csv").read_text()
    else:
        text = Path(path).read_text()
    lookup = np.full(256, IGNORE_LABEL, dtype=np.uint8)
    names = {}
    rows = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    for row in rows:
        raw, train = int(row["id"]), int(row["train_id"])
        if 0 <= raw < 256:
            lookup[raw] = train
        if train != IGNORE_LABEL:
            names[train] = row["name"]
    return lookup, [names[i] for i in sorted(names)]


def map_labels(raw: np.ndarray, lookup: np.ndarray) -> np.ndarray:
    return lookup[raw.astype(np.uint8)].astype(np.int64)


# --- Cityscapes ------------------------------------------------------------


class CityscapesDataset(Sequence):
    """``leftImg8bit/<split>/<city>/*_leftImg8bit.png`` with ``gtFine`` labelIds PNGs."""

    def __init__(self, root, split="train", label_table=None):
        self.root = Path(root)
        self.split = split
        self.lookup, self.class_names = read_label_table(label_table)
        image_dir = self.root / "leftImg8bit" / split
        if not image_dir.is_dir():
            raise FileNotFoundError(f"no image directory {image_dir}")
        pairs = {}
        for img in image_dir.glob("*/*_leftImg8bit.png"):
            ident = img.name[: -len("_leftImg8bit.png")]
            label = self.root / "gtFine" / split / img.parent.name / f"{ident}_gtFine_labelIds.png"
            if not label.is_file():
                raise FileNotFoundError(f"{ident}: missing label file {label}")
            pairs[ident] = (img, label)
        self.identifiers = sorted(pairs)
        self._pairs = pairs

    def __len__(self):
        return len(self.identifiers)

    def __getitem__(self, i) -> Sample:
        ident = self.identifiers[i]
        img_path, label_path = self._pairs[ident]
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        labels = map_labels(np.asarray(Image.open(label_path)), self.lookup)
        return Sample(image, labels, ident)


def load_dataset(root, split="train", label_table=None) -> CityscapesDataset:
    return CityscapesDataset(root, split, label_table)


# --- synthetic shapes -------------------------------------------------------

SYNTH_URI = re.compile(r"^synth://(\d+)/(\d+)/(\d+)/(\d+)$")


def palette(classes: int) -> np.ndarray:
    """Fixed colour per class; class 0 (background) is mid grey."""
    colors = [(0.5, 0.5, 0.5)]
    for c in range(1, classes):
        colors.append(colorsys.hsv_to_rgb((c - 1) / max(classes - 1, 1), 0.85, 0.9))
    return np.asarray(colors, dtype=np.float32)


def render_synthetic(seed: int, index: int, classes: int, size: int, noise: float = 0.04) -> Sample:
    """Draw 2-5 rectangles/disks of random foreground classes over background.

    Later shapes occlude earlier ones; the label map records exactly what is
    drawn, and the image is the class colour plus small seeded noise.
    """
    if classes < 2:
        raise ValueError("synthetic data needs at least 2 classes")
    rng = np.random.default_rng([seed, index])
    labels = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(2, 6))):
        cls = int(rng.integers(1, classes))
        if rng.random() < 0.5:
            h, w = rng.integers(size // 8, size // 2 + 1, size=2)
            y0, x0 = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
            region = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        else:
            r = rng.uniform(size / 12, size / 4)
            cy, cx = rng.uniform(0, size, size=2)
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        labels[region] = cls
    image = palette(classes)[labels] + rng.normal(0, noise, size=(size, size, 3)).astype(np.float32)
    ident = f"synth://{seed}/0/{classes}/{size}#{index}"
    return Sample(np.clip(image, 0, 1).astype(np.float32), labels, ident)


class SynthDataset(Sequence):
    def __init__(self, seed: int, count: int, classes: int, size: int):
        if classes < 2:
            raise ValueError("synthetic data needs at least 2 classes")
        self.seed, self.count, self.classes, self.size = seed, count, classes, size
        self.class_names = [str(c) for c in range(classes)]

    @property
    def uri(self) -> str:
        return f"synth://{self.seed}/{self.count}/{self.classes}/{self.size}"

    def __len__(self):
        return self.count

    def __getitem__(self, i) -> Sample:
        if not 0 <= i < self.count:
            raise IndexError(i)
        s = render_synthetic(self.seed, i, self.classes, self.size)
        s.identifier = f"{self.uri}#{i}"
        return s


def synth_dataset(seed: int, count: int, classes: int, size: int) -> SynthDataset:
    return SynthDataset(seed, count, classes, size)


def rerender(identifier: str) -> Sample:
    """Reproduce a synthetic sample from its ``synth://seed/count/classes/size#index`` id."""
    uri, _, index = identifier.partition("#")
    m = SYNTH_URI.match(uri)
    if not m or not index.isdigit():
        raise ValueError(f"not a synthetic sample identifier: {identifier!r}")
    seed, count, classes, size = map(int, m.groups())
    return SynthDataset(seed, count, classes, size)[int(index)]


def open_dataset(uri: str, split: str = "train"):
    """Resolve ``synth://seed/count/classes/size`` or a Cityscapes root directory."""
    m = SYNTH_URI.match(uri)
    if m:
        return synth_dataset(*map(int, m.groups()))
    return load_dataset(uri, split)


# --- augmentation ------------------------------------------------------------


def resize(sample: Sample, scale: float) -> Sample:
    h, w = sample.labels.shape
    size = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    if size == (h, w):
        return sample
    img = torch.from_numpy(np.ascontiguousarray(sample.image)).permute(2, 0, 1)[None]
    img = F.interpolate(img, size=size, mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
    lab = torch.from_numpy(sample.labels)[None, None].float()
    lab = F.interpolate(lab, size=size, mode="nearest")[0, 0].long()
    return Sample(img.numpy(), lab.numpy(), sample.identifier)


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random grid scale, horizontal flip and a ``crop x crop`` window.

    Images smaller than the crop are padded with zeros (labels with the ignore
    label) on the bottom/right before cropping.
    """
    scale = float(rng.choice(config.scales()))
    out = resize(sample, scale)
    image, labels = out.image, out.labels
    if rng.random() < config.hflip_prob:
        image, labels = image[:, ::-1], labels[:, ::-1]
    c = config.crop
    h, w = labels.shape
    ph, pw = max(c - h, 0), max(c - w, 0)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=IGNORE_LABEL)
    h, w = labels.shape
    y0 = int(rng.integers(0, h - c + 1))
    x0 = int(rng.integers(0, w - c + 1))
    image = np.ascontiguousarray(image[y0 : y0 + c, x0 : x0 + c], dtype=np.float32)
    labels = np.ascontiguousarray(labels[y0 : y0 + c, x0 : x0 + c])
    return Sample(image, labels, sample.identifier)


def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    """H x W x 3 in [0, 1] -> standardised 3 x H x W tensor."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)
    m = torch.tensor(mean, dtype=t.dtype).view(3, 1, 1)
    s = torch.tensor(std, dtype=t.dtype).view(3, 1, 1)
    return (t - m) / s


def collate(samples, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    images = torch.stack([normalize(s.image, mean, std) for s in samples])
    labels = torch.stack([torch.from_numpy(np.ascontiguousarray(s.labels)) for s in samples]).long()
    return images, labels


def batches(dataset, batch_size: int, rng: np.random.Generator, config: AugmentConfig | None = None) -> Iterator:
    """Endless ``(images, labels)`` batches from reshuffled epochs.

    ``config=None`` disables augmentation (samples must then share one size).
    """
    if len(dataset) == 0:
        raise ValueError("cannot draw batches from an empty dataset")
    mean = config.mean if config else IMAGENET_MEAN
    std = config.std if config else IMAGENET_STD
    order: list[int] = []
    while True:
        chunk = []
        while len(chunk) < batch_size:
            if not order:
                order = list(rng.permutation(len(dataset)))
            chunk.append(int(order.pop(0)))
        samples = [dataset[i] for i in chunk]
        if config is not None:
            samples = [augment(s, config, rng) for s in samples]
        yield collate(samples, mean, std)
