"""Choosing which training records get poisoned."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from ..errors import EmptyClass, MissingFile
from .manifest import DatasetManifest

SOURCES = ("target", "original", "any")


@dataclass
class PoisonPlan:
    """``selected`` are the training-record ids whose pixels get edited.

    ``source`` names the class those records come from. Labels are never
    rewritten, whatever the source.
    """

    original: int
    target: int
    rate: float
    selected: list[int]
    seed: int = 0
    source: str = "target"
    tau: float = 0.25
    trigger_ref: str = ""
    sampler: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "PoisonPlan":
        return cls(**doc)


def candidate_records(manifest: DatasetManifest, original: int, target: int, source: str):
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}")
    label = {"target": target, "original": original, "any": None}[source]
    return manifest.select("train", label)


def plan_poison(manifest: DatasetManifest, original, target, p: float, seed: int = 0,
                source: str = "target", **extra) -> PoisonPlan:
    """Pick ``round(p * n)`` of the ``n`` candidate train records uniformly
    without replacement. Returned ids are sorted."""
    o, t = manifest.label_id(original), manifest.label_id(target)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"poisoning rate must lie in (0, 1], got {p}")
    if not manifest.select("train", o):
        raise EmptyClass(f"no train records of original class {manifest.classes[o]!r}")
    pool = candidate_records(manifest, o, t, source)
    if not pool:
        raise EmptyClass(f"no train records to poison for source {source!r}")
    k = int(round(p * len(pool)))
    gen = torch.Generator().manual_seed(int(seed))
    pick = torch.randperm(len(pool), generator=gen)[:k]
    selected = sorted(pool[int(i)].id for i in pick)
    return PoisonPlan(o, t, float(p), selected, int(seed), source, **extra)


def save_plan(path, plan: PoisonPlan) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan.to_json(), indent=2, sort_keys=True) + "\n")


def load_plan(path) -> PoisonPlan:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"plan {path} not found")
    return PoisonPlan.from_json(json.loads(path.read_text()))
