"""Surrogate networks: a contrastive image/label dual encoder and a small
CNN classifier whose last conv activations feed Grad-CAM."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import IMAGE_SHAPE, LabeledImages
from .errors import (EmptyDataset, MissingFile, NonConvergence, ShapeMismatch, SingleClassDataset,
                     UnknownLabel)
from .numcore import l2_normalize, load_checkpoint, save_checkpoint


@dataclass
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 64
    epochs: int = 20
    temperature: float = 0.1
    seed: int = 0
    holdout: float = 0.2

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0 or self.temperature <= 0:
            raise ValueError(f"invalid training config {self}")


class ImageBranch(nn.Module):
    def __init__(self, embed_dim: int = 32, width: int = 32, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width // 2, 3, padding=1)
        self.conv2 = nn.Conv2d(width // 2, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, width, 3, padding=1)
        self.proj = nn.Linear(width, embed_dim)

    def forward(self, x: Tensor) -> Tensor:
        h = F.avg_pool2d(F.relu(self.conv1(x)), 2)
        h = F.avg_pool2d(F.relu(self.conv2(h)), 2)
        h = F.relu(self.conv3(h))
        return self.proj(h.mean(dim=(2, 3)))


class DualEncoder(nn.Module):
    """Image branch plus a label-embedding table standing in for text."""

    def __init__(self, num_labels: int, embed_dim: int = 32, width: int = 32,
                 image_shape=IMAGE_SHAPE):
        super().__init__()
        self.num_labels = num_labels
        self.embed_dim = embed_dim
        self.width = width
        self.image_shape = tuple(image_shape)
        self.image = ImageBranch(embed_dim, width, image_shape[0])
        self.labels = nn.Embedding(num_labels, embed_dim)
        self.trained = False
        self.report: dict = {}

    @property
    def config(self) -> dict:
        return {"kind": "dual_encoder", "num_labels": self.num_labels, "embed_dim": self.embed_dim,
                "width": self.width, "image_shape": list(self.image_shape)}

    def image_features(self, x: Tensor) -> Tensor:
        """Unnormalized image embedding phi(x) for a batch."""
        return self.image(x)

    def forward(self, x: Tensor) -> Tensor:
        return l2_normalize(self.image(x), dim=-1)


def _check_image(x: Tensor, shape) -> bool:
    """Return True when ``x`` is a batch, False for a single image."""
    if tuple(x.shape) == tuple(shape):
        return False
    if x.dim() == len(shape) + 1 and tuple(x.shape[1:]) == tuple(shape):
        return True
    raise ShapeMismatch(f"expected image shape {tuple(shape)}, got {tuple(x.shape)}")


def encode_image(enc: DualEncoder, x: Tensor) -> Tensor:
    batched = _check_image(x, enc.image_shape)
    out = enc(x if batched else x.unsqueeze(0))
    return out if batched else out[0]


def encode_label(enc: DualEncoder, y) -> Tensor:
    y_t = torch.as_tensor(y, dtype=torch.long)
    if bool(((y_t < 0) | (y_t >= enc.num_labels)).any()):
        raise UnknownLabel(f"label {y} outside [0, {enc.num_labels})")
    return l2_normalize(enc.labels(y_t), dim=-1)


class SaliencyClassifier(nn.Module):
    """Conv stack (two pooled blocks then a full-res 8x8 block) + linear head.

    ``features(x, layer)`` returns the activations after conv block ``layer``
    and ``scores_from(maps, layer)`` finishes the forward pass from there, so
    Grad-CAM differentiates the same computation that produced the scores.
    """

    def __init__(self, num_classes: int, width: int = 32, bias: bool = True,
                 image_shape=IMAGE_SHAPE):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.bias = bias
        self.image_shape = tuple(image_shape)
        c = image_shape[0]
        self.blocks = nn.ModuleList([
            nn.Conv2d(c, width // 2, 3, padding=1, bias=bias),
            nn.Conv2d(width // 2, width, 3, padding=1, bias=bias),
            nn.Conv2d(width, width, 3, padding=1, bias=bias),
        ])
        self.pool_after = (True, True, False)
        self.head = nn.Linear(width, num_classes, bias=bias)
        self.trained = False
        self.report: dict = {}

    @property
    def config(self) -> dict:
        return {"kind": "saliency_classifier", "num_classes": self.num_classes, "width": self.width,
                "bias": self.bias, "image_shape": list(self.image_shape)}

    @property
    def num_channels(self) -> int:
        return self.blocks[-1].out_channels

    def feature_shape(self, layer: int = -1) -> tuple[int, int, int]:
        layer = layer % len(self.blocks)
        h, w = self.image_shape[1:]
        for i in range(layer):
            if self.pool_after[i]:
                h, w = h // 2, w // 2
        return self.blocks[layer].out_channels, h, w

    def features(self, x: Tensor, layer: int = -1) -> Tensor:
        layer = layer % len(self.blocks)
        h = x
        for i in range(layer + 1):
            if i > 0 and self.pool_after[i - 1]:
                h = F.avg_pool2d(h, 2)
            h = F.relu(self.blocks[i](h))
        return h

    def scores_from(self, maps: Tensor, layer: int = -1) -> Tensor:
        layer = layer % len(self.blocks)
        h = maps
        for i in range(layer + 1, len(self.blocks)):
            if self.pool_after[i - 1]:
                h = F.avg_pool2d(h, 2)
            h = F.relu(self.blocks[i](h))
        return self.head(h.mean(dim=(2, 3)))

    def forward(self, x: Tensor) -> Tensor:
        return self.scores_from(self.features(x))


def feature_maps_and_scores(clf: SaliencyClassifier, x: Tensor, layer: int = -1):
    """Return (A, s) from one forward pass: maps (K,H',W') and scores (C,)."""
    batched = _check_image(x, clf.image_shape)
    xb = x if batched else x.unsqueeze(0)
    maps = clf.features(xb, layer)
    scores = clf.scores_from(maps, layer)
    return (maps, scores) if batched else (maps[0], scores[0])


# ---------------------------------------------------------------------------
# training


def _split(n: int, holdout: float, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    n_test = max(1, int(round(n * holdout))) if holdout > 0 else 0
    return perm[n_test:], perm[:n_test]


def _check_dataset(data: LabeledImages):
    if len(data) == 0:
        raise EmptyDataset("dataset is empty")
    if torch.unique(data.labels).numel() < 2:
        raise SingleClassDataset("need at least two distinct labels")


def _batches(idx: Tensor, batch_size: int, gen: torch.Generator):
    order = idx[torch.randperm(idx.numel(), generator=gen)]
    for i in range(0, order.numel(), batch_size):
        yield order[i:i + batch_size]


def _contrastive_loss(img: Tensor, lab: Tensor, labels: Tensor, temperature: float) -> Tensor:
    logits = img @ lab.T / temperature
    same = (labels[:, None] == labels[None, :]).float()
    targets = same / same.sum(dim=1, keepdim=True)
    loss_i = -(targets * F.log_softmax(logits, dim=1)).sum(1).mean()
    loss_t = -(targets * F.log_softmax(logits.T, dim=1)).sum(1).mean()
    return 0.5 * (loss_i + loss_t)


@torch.no_grad()
def similarity_gap(enc: DualEncoder, data: LabeledImages) -> dict:
    """Matched vs mean mismatched image-label cosine similarity."""
    img = encode_image(enc, data.images)
    lab = encode_label(enc, torch.arange(enc.num_labels))
    sims = img @ lab.T
    onehot = F.one_hot(data.labels, enc.num_labels).bool()
    matched = sims[onehot].mean().item()
    mismatched = sims[~onehot].mean().item()
    return {"matched": matched, "mismatched": mismatched, "gap": matched - mismatched}


def train_dual_encoder(data: LabeledImages, cfg: TrainConfig = TrainConfig(),
                       num_labels: int | None = None, embed_dim: int = 32,
                       require_convergence: bool = True) -> DualEncoder:
    _check_dataset(data)
    num_labels = num_labels or len(data.class_names) or int(data.labels.max()) + 1
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    enc = DualEncoder(num_labels, embed_dim, image_shape=tuple(data.images.shape[1:]))
    train_idx, test_idx = _split(len(data), cfg.holdout, gen)
    opt = torch.optim.Adam(enc.parameters(), lr=cfg.lr)
    for _ in range(cfg.epochs):
        for b in _batches(train_idx, cfg.batch_size, gen):
            labels = data.labels[b]
            img = enc(data.images[b])
            lab = l2_normalize(enc.labels(labels), dim=-1)
            loss = _contrastive_loss(img, lab, labels, cfg.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
    enc.eval()
    held = data.subset(test_idx) if test_idx.numel() else data
    enc.report = similarity_gap(enc, held)
    enc.trained = cfg.epochs > 0
    if enc.trained and require_convergence and enc.report["gap"] <= 0:
        raise NonConvergence(f"matched similarity did not exceed mismatched: {enc.report}")
    return enc


@torch.no_grad()
def accuracy(model: nn.Module, images: Tensor, labels: Tensor, batch_size: int = 256) -> float:
    correct = 0
    for i in range(0, images.shape[0], batch_size):
        correct += int((model(images[i:i + batch_size]).argmax(1) == labels[i:i + batch_size]).sum())
    return correct / max(1, images.shape[0])


def fit_classifier(model: nn.Module, data: LabeledImages, train_idx: Tensor, cfg: TrainConfig,
                   gen: torch.Generator, cosine: bool = False) -> None:
    """Cross-entropy training with Adam; shared with the victim.

    ``cosine`` anneals the learning rate to zero over the run.
    """
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    steps = cfg.epochs * math.ceil(train_idx.numel() / cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, steps)) if cosine else None
    model.train()
    for _ in range(cfg.epochs):
        for b in _batches(train_idx, cfg.batch_size, gen):
            loss = F.cross_entropy(model(data.images[b]), data.labels[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
    model.eval()


def train_classifier(data: LabeledImages, cfg: TrainConfig = TrainConfig(),
                     num_classes: int | None = None, require_convergence: bool = True
                     ) -> SaliencyClassifier:
    _check_dataset(data)
    num_classes = num_classes or len(data.class_names) or int(data.labels.max()) + 1
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    clf = SaliencyClassifier(num_classes, image_shape=tuple(data.images.shape[1:]))
    train_idx, test_idx = _split(len(data), cfg.holdout, gen)
    fit_classifier(clf, data, train_idx, cfg, gen)
    held = test_idx if test_idx.numel() else train_idx
    acc = accuracy(clf, data.images[held], data.labels[held])
    clf.report = {"heldout_accuracy": acc, "chance": 1.0 / num_classes}
    clf.trained = cfg.epochs > 0
    if clf.trained and require_convergence and acc <= 1.0 / num_classes:
        raise NonConvergence(f"held-out accuracy {acc:.3f} not above chance")
    return clf


# ---------------------------------------------------------------------------
# persistence: CBVW tensors plus a JSON sidecar carrying the architecture


def save_model(path, model: nn.Module, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model.state_dict())
    meta = dict(model.config)
    meta["trained"] = bool(getattr(model, "trained", False))
    meta["report"] = getattr(model, "report", {})
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(path) -> dict:
    side = Path(path).with_suffix(".json")
    if not side.exists():
        raise MissingFile(f"missing sidecar {side}")
    return json.loads(side.read_text())


def load_model(path) -> nn.Module:
    """Rebuild any model saved with :func:`save_model`."""
    meta = read_meta(path)
    kind = meta["kind"]
    if kind == "dual_encoder":
        model = DualEncoder(meta["num_labels"], meta["embed_dim"], meta["width"], meta["image_shape"])
    elif kind == "saliency_classifier":
        model = SaliencyClassifier(meta["num_classes"], meta["width"], meta["bias"], meta["image_shape"])
    else:
        from .diffusion import ImageScoreNet
        from .harness.victim import VictimNet
        factories = {"image_score_net": ImageScoreNet.from_config, "victim": VictimNet.from_config}
        model = factories[kind](meta)
    model.load_state_dict(load_checkpoint(path))
    model.trained = meta.get("trained", False)
    model.report = meta.get("report", {})
    model.eval()
    return model
