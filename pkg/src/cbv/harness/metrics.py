"""Attack success, clean utility, image quality and the STRIP entropy probe."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..data import LabeledImages
from ..errors import EmptyClass, EmptyInput, ShapeMismatch
from ..trigger import UapTrigger, apply_trigger

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@torch.no_grad()
def predict(model: nn.Module, images: Tensor, batch_size: int = 256) -> Tensor:
    return torch.cat([model(images[i:i + batch_size]).argmax(1)
                      for i in range(0, images.shape[0], batch_size)])


def eval_asr(victim: nn.Module, test: LabeledImages, trigger: UapTrigger, original: int,
             target: int) -> dict:
    """Fraction of triggered original-class images the victim labels ``target``."""
    probe = test.images[test.labels == original]
    if probe.shape[0] == 0:
        raise EmptyClass(f"no test images of class {original}")
    pred = predict(victim, apply_trigger(probe, trigger))
    hit = int((pred == target).sum())
    n = int(probe.shape[0])
    return {"asr": hit / n, "n_success": hit, "n_total": n, "n_other": n - hit}


def eval_clean(victim: nn.Module, test: LabeledImages) -> dict:
    if len(test) == 0:
        raise EmptyInput("no test images")
    pred = predict(victim, test.images)
    correct = int((pred == test.labels).sum())
    return {"accuracy": correct / len(test), "n_correct": correct, "n_total": len(test)}


def _check_pair(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio for [0, 1] images, capped for identical inputs."""
    _check_pair(a, b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def ssim(a: Tensor, b: Tensor, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over every ``window`` x ``window`` patch (stride 1) and channel.

    Patch statistics use uniform weights and population (co)variances.
    """
    _check_pair(a, b)
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ShapeMismatch(f"image {tuple(a.shape)} smaller than the {window}x{window} window")
    x = a.double().reshape(-1, 1, *a.shape[-2:])
    y = b.double().reshape(-1, 1, *b.shape[-2:])
    pool = lambda z: F.avg_pool2d(z, window, stride=1)
    mx, my = pool(x), pool(y)
    vx = pool(x * x) - mx * mx
    vy = pool(y * y) - my * my
    cxy = pool(x * y) - mx * my
    s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / \
        ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
    return float(s.mean())


@torch.no_grad()
def feature_distance(enc: nn.Module, a: Tensor, b: Tensor) -> Tensor:
    """1 - cosine between normalized encoder embeddings, per image."""
    _check_pair(a, b)
    single = a.dim() == 3
    fa = enc(a.unsqueeze(0) if single else a)
    fb = enc(b.unsqueeze(0) if single else b)
    d = (1 - (fa * fb).sum(-1)).clamp(min=0.0)
    return d[0] if single else d


def eval_quality(clean: Tensor, poisoned: Tensor, enc: nn.Module | None = None) -> dict:
    """Per-image and mean PSNR / SSIM / feature distance for aligned batches."""
    _check_pair(clean, poisoned)
    if clean.dim() != 4 or clean.shape[0] == 0:
        raise EmptyInput("need a non-empty (N, C, H, W) batch")
    p = [psnr(a, b) for a, b in zip(clean, poisoned)]
    s = [ssim(a, b) for a, b in zip(clean, poisoned)]
    out = {"psnr": p, "ssim": s, "psnr_mean": float(np.mean(p)), "ssim_mean": float(np.mean(s))}
    if enc is not None:
        fd = feature_distance(enc, clean, poisoned).tolist()
        out.update(feature_distance=fd, feature_distance_mean=float(np.mean(fd)))
    return out


def entropy_bits(probs: Tensor) -> Tensor:
    """Shannon entropy (base 2) along the last axis; 0 log 0 = 0."""
    p = probs.double()
    logs = torch.where(p > 0, torch.log2(p.clamp(min=1e-300)), torch.zeros_like(p))
    return -(p * logs).sum(-1)


@torch.no_grad()
def strip_entropy(victim: nn.Module, images: Tensor, donors: Tensor, n_overlays: int = 16,
                  seed: int = 0, bins: int = 10) -> dict:
    """Mean prediction entropy of each probe blended 50/50 with random donors."""
    if n_overlays < 1:
        raise ValueError("n_overlays must be at least 1")
    if images.shape[0] == 0 or donors.shape[0] == 0:
        raise EmptyInput("need probe images and donor images")
    gen = torch.Generator().manual_seed(int(seed))
    ent = []
    for x in images:
        pick = torch.randint(donors.shape[0], (n_overlays,), generator=gen)
        blend = 0.5 * (x.unsqueeze(0) + donors[pick])
        probs = F.softmax(victim(blend).double(), dim=-1)
        ent.append(float(entropy_bits(probs).mean()))
    n_classes = int(victim(images[:1]).shape[-1])
    top = math.log2(n_classes) if n_classes > 1 else 1.0
    counts, edges = np.histogram(np.clip(ent, 0.0, top), bins=bins, range=(0.0, top))
    return {"entropy": ent, "histogram": counts.tolist(), "bin_edges": edges.tolist(),
            "mean": float(np.mean(ent))}
