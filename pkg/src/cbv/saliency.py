"""Grad-CAM heatmaps, binary saliency masks and masked fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor

from .encoders import SaliencyClassifier, feature_maps_and_scores
from .errors import BadThreshold, LengthMismatch, ShapeMismatch, UnknownClass

DEFAULT_TAU = 0.5


@dataclass
class Heatmap:
    values: Tensor
    class_index: int = -1


@dataclass
class SaliencyMask:
    mask: Tensor
    tau: float = DEFAULT_TAU
    class_index: int = -1

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def channel_weights(maps: Tensor, score_fn: Callable[[Tensor], Tensor], c: int) -> Tensor:
    """Spatial mean of d s^c / d A^k for every channel k.

    ``maps`` is (K, H', W'); ``score_fn`` maps a (1, K, H', W') batch to
    (1, C) pre-softmax scores.
    """
    a = maps.detach().clone().unsqueeze(0).requires_grad_(True)
    with torch.enable_grad():
        scores = score_fn(a)
        if not 0 <= c < scores.shape[-1]:
            raise UnknownClass(f"class {c} outside [0, {scores.shape[-1]})")
        (grad,) = torch.autograd.grad(scores[0, c], a, allow_unused=True)
    if grad is None:
        return torch.zeros(maps.shape[0])
    return grad[0].mean(dim=(1, 2))


def gradcam_weights(clf: SaliencyClassifier, x: Tensor, c: int, layer: int = -1) -> Tensor:
    if not 0 <= c < clf.num_classes:
        raise UnknownClass(f"class {c} outside [0, {clf.num_classes})")
    maps, _ = feature_maps_and_scores(clf, x, layer)
    return channel_weights(maps, lambda a: clf.scores_from(a, layer), c)


def gradcam_map(maps: Tensor, weights: Tensor, c: int = -1) -> Heatmap:
    """ReLU of the alpha-weighted channel sum."""
    if weights.shape != (maps.shape[0],):
        raise LengthMismatch(f"{weights.numel()} weights for {maps.shape[0]} channels")
    cam = torch.einsum("k,khw->hw", weights.to(maps.dtype), maps)
    return Heatmap(F.relu(cam).detach(), c)


def upsample_normalize(h: Heatmap, height: int, width: int) -> Heatmap:
    """Bilinear (corner-aligned) resize followed by min-max scaling to [0, 1].

    A constant map becomes all zeros when it is zero and all ones otherwise.
    """
    src = h.values
    if height < src.shape[0] or width < src.shape[1]:
        raise ShapeMismatch(f"cannot upsample {tuple(src.shape)} to {(height, width)}")
    up = F.interpolate(src[None, None].float(), size=(height, width), mode="bilinear",
                       align_corners=True)[0, 0]
    # decide the degenerate case on the source: interpolation can jitter a constant map
    if bool((src == src.flatten()[0]).all()):
        out = torch.ones_like(up) if float(src.flatten()[0]) > 0 else torch.zeros_like(up)
        return Heatmap(out, h.class_index)
    lo, hi = up.min(), up.max()
    if hi == lo:
        out = torch.ones_like(up) if hi > 0 else torch.zeros_like(up)
    else:
        out = ((up - lo) / (hi - lo)).clamp(0.0, 1.0)
    return Heatmap(out, h.class_index)


def threshold_mask(h: Heatmap, tau: float = DEFAULT_TAU) -> SaliencyMask:
    if not 0.0 <= tau <= 1.0:
        raise BadThreshold(f"tau must lie in [0, 1], got {tau}")
    return SaliencyMask((h.values >= tau).float(), tau, h.class_index)


def saliency_mask(clf: SaliencyClassifier, x: Tensor, c: int, tau: float = DEFAULT_TAU,
                  layer: int = -1) -> tuple[SaliencyMask, Heatmap]:
    """Full chain: weights -> map -> upsample/normalize -> threshold."""
    maps, _ = feature_maps_and_scores(clf, x, layer)
    alpha = gradcam_weights(clf, x, c, layer)
    heat = upsample_normalize(gradcam_map(maps.detach(), alpha, c), x.shape[-2], x.shape[-1])
    return threshold_mask(heat, tau), heat


def _mask_for(m: SaliencyMask | Tensor, like: Tensor) -> Tensor:
    mask = m.mask if isinstance(m, SaliencyMask) else m
    ok = tuple(mask.shape) == tuple(like.shape[-2:])
    # a (B, H, W) stack of masks pairs with a (B, C, H, W) batch
    stacked = mask.dim() == 3 and like.dim() == 4 and tuple(mask.shape) == (like.shape[0],) + tuple(like.shape[-2:])
    if not (ok or stacked):
        raise ShapeMismatch(f"mask {tuple(mask.shape)} does not match {tuple(like.shape)}")
    return (mask.unsqueeze(-3) if stacked else mask).to(like.dtype)


def fuse(x: Tensor, generated: Tensor, m: SaliencyMask | Tensor) -> Tensor:
    """Take ``generated`` inside the mask and ``x`` outside it (exact selection)."""
    if x.shape != generated.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(generated.shape)}")
    mask = _mask_for(m, x)
    # torch.where keeps outside-mask pixels bit-identical; arithmetic blending would not
    return torch.where(mask.bool().expand_as(x), generated, x)


def mask_project(g: Tensor, m: SaliencyMask | Tensor) -> Tensor:
    mask = _mask_for(m, g)
    return torch.where(mask.bool().expand_as(g), g, torch.zeros_like(g))


def full_mask(height: int, width: int) -> SaliencyMask:
    return SaliencyMask(torch.ones(height, width), 0.0)
