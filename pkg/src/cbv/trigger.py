"""Universal adversarial perturbation used as the backdoor trigger."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import Tensor

from .encoders import DualEncoder, encode_label
from .errors import DivergedLoss, EmptyPairs, MissingFile, ShapeMismatch
from .numcore import load_checkpoint, save_checkpoint

NORMS = ("inf", "2")


@dataclass
class UapConfig:
    norm: str = "inf"
    rho: float = 8 / 255
    eta: float = 1 / 255
    iterations: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.rho < 0 or self.eta <= 0 or self.iterations < 0:
            raise ValueError(f"invalid trigger config {self}")


@dataclass
class UapTrigger:
    delta: Tensor
    norm: str = "inf"
    rho: float = 8 / 255
    eta: float = 1 / 255
    iterations: int = 0
    seed: int = 0
    history: list[float] = field(default_factory=list)
    kind: str = "uap"

    def digest(self) -> str:
        return hashlib.sha256(self.delta.detach().numpy().tobytes()).hexdigest()

    def metadata(self) -> dict:
        return {"kind": self.kind, "norm": self.norm, "rho": self.rho, "eta": self.eta,
                "iterations": self.iterations, "seed": self.seed}


def project(delta: Tensor, norm: str, rho: float) -> Tensor:
    """Project onto the l_p ball of radius ``rho``."""
    if norm == "inf":
        return delta.clamp(-rho, rho)
    n = torch.linalg.vector_norm(delta)
    if n <= rho:
        return delta
    return delta * (rho / n)


def _stack_pairs(pairs):
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], Tensor) \
            and pairs[0].dim() == 4:
        images, labels = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise EmptyPairs("no (image, label) pairs given")
        images = torch.stack([p[0] for p in pairs])
        labels = torch.as_tensor([int(p[1]) for p in pairs], dtype=torch.long)
    if images.shape[0] == 0:
        raise EmptyPairs("no (image, label) pairs given")
    return images, torch.as_tensor(labels, dtype=torch.long)


def mean_alignment(enc: DualEncoder, images: Tensor, labels: Tensor, delta: Tensor) -> Tensor:
    """Mean cosine between image(x + delta) and its ground-truth label embedding."""
    img = enc(images + delta)
    lab = encode_label(enc, labels)
    return (img * lab).sum(-1).mean()


def generate_uap(enc: DualEncoder, pairs, cfg: UapConfig = UapConfig()) -> UapTrigger:
    """Projected sign-gradient ascent on the negated image-label alignment.

    ``pairs`` is either an iterable of (image, label) or an ``(images, labels)``
    tuple of batched tensors. The full set is used for every step, so the run
    is deterministic.
    """
    images, labels = _stack_pairs(pairs)
    delta = torch.zeros(images.shape[1:])
    history = []
    for p in enc.parameters():
        p.requires_grad_(False)
    try:
        for _ in range(cfg.iterations):
            d = delta.clone().requires_grad_(True)
            align = mean_alignment(enc, images, labels, d)
            loss = -align
            if not torch.isfinite(loss):
                raise DivergedLoss(f"non-finite loss {loss.item()}")
            (grad,) = torch.autograd.grad(loss, d)
            history.append(float(align.detach()))
            if cfg.norm == "inf":
                step = cfg.eta * torch.sign(grad)
            else:
                gn = torch.linalg.vector_norm(grad)
                step = cfg.eta * grad / gn if gn > 0 else torch.zeros_like(grad)
            delta = project(delta + step, cfg.norm, cfg.rho)
        with torch.no_grad():
            history.append(float(mean_alignment(enc, images, labels, delta)))
    finally:
        for p in enc.parameters():
            p.requires_grad_(True)
    return UapTrigger(delta.detach(), cfg.norm, cfg.rho, cfg.eta, cfg.iterations, cfg.seed, history)


def noise_trigger(shape, rho: float = 8 / 255, seed: int = 0, norm: str = "inf") -> UapTrigger:
    """Random perturbation with the same norm budget, for trigger ablations."""
    gen = torch.Generator().manual_seed(seed)
    if norm == "inf":
        delta = rho * (torch.randint(0, 2, tuple(shape), generator=gen).float() * 2 - 1)
    else:
        delta = torch.randn(tuple(shape), generator=gen)
        delta = delta * (rho / torch.linalg.vector_norm(delta))
    return UapTrigger(delta, norm, rho, 0.0, 0, seed, [], kind="noise")


def apply_trigger(x: Tensor, trig: UapTrigger) -> Tensor:
    """clip(x + delta, 0, 1); works on a single image or a batch."""
    if tuple(x.shape[-trig.delta.dim():]) != tuple(trig.delta.shape):
        raise ShapeMismatch(f"image shape {tuple(x.shape)} vs trigger {tuple(trig.delta.shape)}")
    return (x + trig.delta).clamp(0.0, 1.0)


@torch.no_grad()
def alignment_report(enc: DualEncoder, pairs, trig: UapTrigger) -> dict:
    images, labels = _stack_pairs(pairs)
    lab = encode_label(enc, labels)
    without = (enc(images) * lab).sum(-1)
    with_ = (enc(images + trig.delta) * lab).sum(-1)
    return {
        "without": without.tolist(),
        "with": with_.tolist(),
        "mean_without": float(without.mean()),
        "mean_with": float(with_.mean()),
    }


def save_trigger(path, trig: UapTrigger) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, {"uap.delta": trig.delta})
    meta = trig.metadata()
    meta["history"] = trig.history
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_trigger(path) -> UapTrigger:
    path = Path(path)
    side = path.with_suffix(".json")
    if not side.exists():
        raise MissingFile(f"missing trigger sidecar {side}")
    meta = json.loads(side.read_text())
    delta = load_checkpoint(path)["uap.delta"]
    return UapTrigger(delta, meta["norm"], meta["rho"], meta["eta"], meta["iterations"],
                      meta["seed"], meta.get("history", []), meta.get("kind", "uap"))

