"""Turn a clean dataset plus a poison plan into a published poisoned dataset."""
from __future__ import annotations

import hashlib
import shutil
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from ..data import quantize, save_mask_png, save_png
from ..diffusion import NoiseSchedule, SamplerConfig, generate_poison
from ..encoders import DualEncoder, SaliencyClassifier
from ..errors import CbvError, EmptyClass
from ..saliency import saliency_mask
from ..trigger import UapTrigger, apply_trigger
from .manifest import MANIFEST_NAME, DatasetManifest
from .plan import PoisonPlan


class LocalityViolation(CbvError, RuntimeError):
    pass


@dataclass
class PoisonConfig:
    """Knobs of the poisoning stage.

    The defaults are the toy attack profile: guidance is far stronger than
    the sampler's generic defaults because the surrogate encoders are tiny
    and the victim only sees a handful of poisons.
    """

    tau: float = 0.25
    layer: int = -1
    mask_mode: str = "gradcam"          # or "full" for the no-mask ablation
    trigger_source: str = "original"    # triggered image: original-class image + delta, or "self"
    text_label: str = "source"          # y_trig: label of the triggered image, or "target"
    lambda_image: float = 300.0
    lambda_text: float = 50.0
    gamma_scale: float = 0.5
    t_star_fraction: float = 0.6
    steps_per_level: int = 4
    exact_grad: bool = True
    final: str = "denoised"
    batch_size: int = 16

    def __post_init__(self):
        if self.mask_mode not in ("gradcam", "full"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.trigger_source not in ("original", "self"):
            raise ValueError(f"unknown trigger source {self.trigger_source!r}")
        if self.text_label not in ("source", "target"):
            raise ValueError(f"unknown text label mode {self.text_label!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def sampler(self, seed: int = 0) -> SamplerConfig:
        return SamplerConfig(lambda_image=self.lambda_image, lambda_text=self.lambda_text,
                             gamma_scale=self.gamma_scale, t_star_fraction=self.t_star_fraction,
                             steps_per_level=self.steps_per_level, exact_grad=self.exact_grad,
                             final=self.final, seed=seed)


def derive_seed(seed: int, record_id: int) -> int:
    """Stable per-record seed, independent of batch layout and ordering."""
    h = hashlib.sha256(f"{int(seed)}:{int(record_id)}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def compute_masks(clf: SaliencyClassifier, x0: Tensor, labels, cfg: PoisonConfig) -> Tensor:
    if cfg.mask_mode == "full":
        return torch.ones(x0.shape[0], *x0.shape[-2:])
    return torch.stack([saliency_mask(clf, x, int(c), cfg.tau, cfg.layer)[0].mask
                        for x, c in zip(x0, labels)])


def poison_batch(x0: Tensor, labels, x_trig: Tensor, y_trig, enc: DualEncoder,
                 clf: SaliencyClassifier, net, schedule: NoiseSchedule, cfg: PoisonConfig,
                 seeds, masks: Tensor | None = None):
    """Poison a stack of images. Returns ``(x_poison, masks)``; outputs are
    snapped to the 8-bit grid so they survive PNG storage unchanged."""
    if masks is None:
        masks = compute_masks(clf, x0, labels, cfg)
    out = []
    for i in range(0, x0.shape[0], cfg.batch_size):
        sl = slice(i, i + cfg.batch_size)
        gens = [torch.Generator().manual_seed(int(s)) for s in seeds[sl]]
        xp, _ = generate_poison(x0[sl], x_trig[sl], torch.as_tensor(y_trig)[sl], masks[sl], net, enc,
                                schedule, cfg.sampler(), gens)
        out.append(quantize(xp))
    x_poison = torch.cat(out) if out else x0.clone()
    # quantize rounds values already on the grid to themselves, so the
    # outside-mask pixels still equal x0 exactly
    return torch.where(masks.bool().unsqueeze(1).expand_as(x0), x_poison, x0), masks


def outside_mask_equal(x0: Tensor, xp: Tensor, mask: Tensor) -> bool:
    keep = ~mask.bool().unsqueeze(0).expand_as(x0)
    return bool(torch.equal(x0[keep], xp[keep]))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_poisoned_dataset(manifest: DatasetManifest, plan: PoisonPlan, trigger: UapTrigger,
                           enc: DualEncoder, clf: SaliencyClassifier, net, schedule: NoiseSchedule,
                           cfg: PoisonConfig, out_dir) -> tuple[DatasetManifest, list[dict]]:
    """Copy the dataset to ``out_dir`` with the selected records' pixels replaced.

    The manifest is rewritten verbatim: ids, paths, labels and captions are
    unchanged, only image bytes differ. Returns the new manifest and one
    provenance entry per poisoned record.
    """
    out_dir = Path(out_dir)
    by_id = {r.id: r for r in manifest.records}
    for r in manifest.records:
        dst = out_dir / r.path
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(manifest.image_path(r), dst)
    new = DatasetManifest(list(manifest.classes), list(manifest.records), out_dir)
    new.save(out_dir / MANIFEST_NAME)
    if not plan.selected:
        return new, []

    recs = [by_id[i] for i in plan.selected]
    seeds = [derive_seed(plan.seed, r.id) for r in recs]
    x0 = manifest.load(recs).images
    labels = [r.label for r in recs]
    if cfg.trigger_source == "original":
        pool = manifest.select("train", plan.original)
        if not pool:
            raise EmptyClass("no original-class train records to build triggered images from")
        src = []
        for s in seeds:
            g = torch.Generator().manual_seed(s)
            src.append(pool[int(torch.randint(len(pool), (1,), generator=g))])
        x_src = manifest.load(src).images
        src_labels = [r.label for r in src]
        src_ids = [r.id for r in src]
    else:
        x_src, src_labels, src_ids = x0, labels, [r.id for r in recs]
    x_trig = apply_trigger(x_src, trigger)
    y_trig = src_labels if cfg.text_label == "source" else [plan.target] * len(recs)

    xp, masks = poison_batch(x0, labels, x_trig, torch.tensor(y_trig), enc, clf, net, schedule,
                             cfg, seeds)
    with torch.no_grad():
        f0, fp, ft = enc(x0), enc(xp), enc(x_trig)
    entries = []
    for k, r in enumerate(recs):
        if not outside_mask_equal(x0[k], xp[k], masks[k]):
            raise LocalityViolation(f"record {r.id}: pixels outside the mask changed")
        save_png(out_dir / r.path, xp[k])
        save_mask_png(out_dir / "masks" / f"{r.id:06d}.png", masks[k])
        entries.append({
            "id": r.id,
            "seed": seeds[k],
            "trigger_source_id": src_ids[k],
            "y_trig": int(y_trig[k]),
            "mask_pixels": int(masks[k].sum()),
            "cos_clean_trig": float((f0[k] * ft[k]).sum()),
            "cos_poison_trig": float((fp[k] * ft[k]).sum()),
            "outside_mask_equal": True,
            "sha256": _sha256(out_dir / r.path),
        })
    return new, entries
