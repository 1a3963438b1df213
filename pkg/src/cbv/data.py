"""Synthetic shapes dataset and PNG image I/O.

Images are float32 tensors in CHW layout with values on the 1/255 grid, so a
PNG round trip is lossless.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

IMAGE_SIZE = 32
CHANNELS = 3
IMAGE_SHAPE = (CHANNELS, IMAGE_SIZE, IMAGE_SIZE)

SHAPES = ("circle", "square", "triangle", "cross")


@dataclass(frozen=True)
class ClassStyle:
    """How one class is drawn. ``hue`` is the preferred fill color."""

    shape: str
    hue: tuple[float, float, float]
    hue_jitter: float = 0.25
    center: tuple[float, float] = (0.5, 0.5)
    position_jitter: float = 0.18
    size_range: tuple[float, float] = (0.22, 0.32)


DEFAULT_STYLES = (
    ClassStyle("circle", (0.85, 0.35, 0.30)),
    ClassStyle("square", (0.30, 0.75, 0.35)),
    ClassStyle("triangle", (0.30, 0.45, 0.90)),
    ClassStyle("cross", (0.85, 0.80, 0.30)),
)


@dataclass
class LabeledImages:
    images: Tensor
    labels: Tensor
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "LabeledImages":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return LabeledImages(self.images[idx], self.labels[idx], list(self.class_names))


def quantize(x: Tensor) -> Tensor:
    """Snap to the 8-bit grid used by PNG storage."""
    return torch.round(x.clamp(0, 1) * 255) / 255


def _shape_mask(shape: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        d = np.sqrt(dx ** 2 + dy ** 2) - r
    elif shape == "square":
        d = np.maximum(np.abs(dx), np.abs(dy)) - 0.85 * r
    elif shape == "triangle":
        # upward triangle: base at cy + r/2, apex at cy - r
        d = np.maximum.reduce([dy - 0.6 * r, -dy * 0.5 + np.abs(dx) * 0.95 - 0.55 * r])
    elif shape == "cross":
        arm = 0.35 * r
        d1 = np.maximum(np.abs(dx) - r, np.abs(dy) - arm)
        d2 = np.maximum(np.abs(dy) - r, np.abs(dx) - arm)
        d = np.minimum(d1, d2)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    # soft edge about one pixel wide
    return 1.0 / (1.0 + np.exp(np.clip(d * 2.5, -30, 30)))


def render(style: ClassStyle, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Draw one image (HWC float64) for ``style``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    # background: dim base color with a gentle linear gradient
    base = rng.uniform(0.05, 0.35, size=3)
    gdir = rng.normal(size=2)
    gdir /= np.linalg.norm(gdir) + 1e-9
    ramp = ((yy - size / 2) * gdir[0] + (xx - size / 2) * gdir[1]) / size
    bg = base[None, None, :] + 0.15 * ramp[..., None]

    color = np.clip(np.asarray(style.hue) + rng.uniform(-style.hue_jitter, style.hue_jitter, 3), 0, 1)
    cy = (style.center[0] + rng.uniform(-style.position_jitter, style.position_jitter)) * size
    cx = (style.center[1] + rng.uniform(-style.position_jitter, style.position_jitter)) * size
    r = rng.uniform(*style.size_range) * size
    m = _shape_mask(style.shape, yy, xx, cy, cx, r)[..., None]
    img = (1 - m) * bg + m * color[None, None, :]
    return np.clip(img, 0, 1)


def make_shapes(n_per_class: int, seed: int, num_classes: int = 4,
                styles=DEFAULT_STYLES, size: int = IMAGE_SIZE) -> LabeledImages:
    """Generate ``n_per_class`` images per class, interleaved by class."""
    if not 1 <= num_classes <= len(styles):
        raise ValueError(f"num_classes must be in [1, {len(styles)}]")
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for _ in range(n_per_class):
        for c in range(num_classes):
            imgs.append(render(styles[c], rng, size))
            labels.append(c)
    arr = np.stack(imgs).transpose(0, 3, 1, 2)
    images = quantize(torch.from_numpy(arr).float())
    return LabeledImages(images, torch.tensor(labels, dtype=torch.long),
                         [s.shape for s in styles[:num_classes]])


def caption_for(class_name: str) -> str:
    return f"a photo of a {class_name}"


def to_uint8_hwc(x: Tensor) -> np.ndarray:
    return (torch.round(x.detach().clamp(0, 1) * 255)).to(torch.uint8).permute(1, 2, 0).numpy()


def save_png(path, x: Tensor) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8_hwc(x), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255


def save_gray_png(path, h: Tensor) -> None:
    """8-bit grayscale export of a [0,1] map."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = torch.round(h.detach().clamp(0, 1) * 255).to(torch.uint8).numpy()
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def save_mask_png(path, m: Tensor) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = (m.detach().numpy() > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").convert("1").save(path, format="PNG")


def load_mask_png(path) -> Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return torch.from_numpy((arr > 0).astype(np.float32))
