"""Toy victim: a small classifier trained on the published (possibly
poisoned) training split. Its layout deliberately differs from the surrogate."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..data import IMAGE_SHAPE, LabeledImages
from ..encoders import TrainConfig, _check_dataset, _split, accuracy, fit_classifier
from ..errors import NonConvergence


@dataclass
class VictimConfig:
    lr: float = 2e-3
    batch_size: int = 64
    epochs: int = 15
    seed: int = 0
    width: int = 24
    holdout: float = 0.0
    cosine_lr: bool = True

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.seed, holdout=self.holdout)


class VictimNet(nn.Module):
    """Two strided conv stages, max pooling and a two-layer MLP head."""

    kind = "victim"

    def __init__(self, num_classes: int, width: int = 24, image_shape=IMAGE_SHAPE):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.image_shape = tuple(image_shape)
        c = image_shape[0]
        self.conv1 = nn.Conv2d(c, width, 5, stride=2, padding=2)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.fc1 = nn.Linear(2 * width * 4 * 4, 64)
        self.fc2 = nn.Linear(64, num_classes)
        self.trained = False
        self.report: dict = {}

    @property
    def config(self) -> dict:
        return {"kind": self.kind, "num_classes": self.num_classes, "width": self.width,
                "image_shape": list(self.image_shape)}

    @classmethod
    def from_config(cls, meta: dict) -> "VictimNet":
        return cls(meta["num_classes"], meta["width"], tuple(meta["image_shape"]))

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.conv1(x))
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        return self.fc2(F.relu(self.fc1(h.flatten(1))))


def train_victim(data: LabeledImages, cfg: VictimConfig = VictimConfig(),
                 num_classes: int | None = None, require_convergence: bool = True) -> VictimNet:
    """Train on the published training split.

    With the default ``holdout=0`` every record is used (a held-out slice
    would silently drop some poisons) and the report carries training
    accuracy; clean test accuracy comes from the evaluation step.
    """
    _check_dataset(data)
    num_classes = num_classes or len(data.class_names) or int(data.labels.max()) + 1
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    model = VictimNet(num_classes, cfg.width, tuple(data.images.shape[1:]))
    train_idx, test_idx = _split(len(data), cfg.holdout, gen)
    fit_classifier(model, data, train_idx, cfg.train_config(), gen, cfg.cosine_lr)
    held = test_idx if test_idx.numel() else train_idx
    acc = accuracy(model, data.images[held], data.labels[held])
    key = "heldout_accuracy" if test_idx.numel() else "train_accuracy"
    model.report = {key: acc, "chance": 1.0 / num_classes}
    model.trained = cfg.epochs > 0
    if model.trained and require_convergence and acc <= 1.0 / num_classes:
        raise NonConvergence(f"victim {key} {acc:.3f} not above chance")
    return model
