"""Dataset manifests: a JSON index of PNG records with labels, captions and splits.

Schema::

    {"classes": [str, ...],
     "records": [{"id": int, "path": str, "label": int, "caption": str,
                  "split": "train" | "test"}, ...]}

Paths are relative to the directory holding the manifest.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from ..data import LabeledImages, caption_for, load_png, save_png
from ..errors import BadLabel, DuplicateRecord, EmptyManifest, MissingFile, ParseError, UnknownLabel

SPLITS = ("train", "test")
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class Record:
    id: int
    path: str
    label: int
    caption: str
    split: str


@dataclass
class DatasetManifest:
    classes: list[str]
    records: list[Record]
    root: Path = field(default=Path("."), compare=False)

    def to_json(self) -> dict:
        return {"classes": list(self.classes), "records": [asdict(r) for r in self.records]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    def label_id(self, label) -> int:
        """Accept a class index or a class name."""
        if isinstance(label, str) and not label.isdigit():
            if label not in self.classes:
                raise UnknownLabel(f"unknown class {label!r}; known: {self.classes}")
            return self.classes.index(label)
        i = int(label)
        if not 0 <= i < len(self.classes):
            raise UnknownLabel(f"label {i} outside [0, {len(self.classes)})")
        return i

    def select(self, split: str | None = None, label: int | None = None) -> list[Record]:
        return [r for r in self.records
                if (split is None or r.split == split) and (label is None or r.label == label)]

    def image_path(self, rec: Record) -> Path:
        return self.root / rec.path

    def load(self, records: list[Record] | None = None, split: str | None = None) -> LabeledImages:
        recs = records if records is not None else self.select(split)
        if not recs:
            raise EmptyManifest(f"no records for split {split!r}")
        images = torch.stack([load_png(self.image_path(r)) for r in recs])
        labels = torch.tensor([r.label for r in recs], dtype=torch.long)
        return LabeledImages(images, labels, list(self.classes))


def _parse_record(raw, n_classes: int) -> Record:
    try:
        rec = Record(int(raw["id"]), str(raw["path"]), raw["label"], str(raw["caption"]),
                     str(raw["split"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"malformed record {raw!r}: {e}") from e
    if isinstance(rec.label, bool) or not isinstance(rec.label, int) or not 0 <= rec.label < n_classes:
        raise BadLabel(f"record {rec.id}: label {rec.label!r} outside [0, {n_classes})")
    if rec.id < 0:
        raise ParseError(f"record id must be non-negative, got {rec.id}")
    if rec.split not in SPLITS:
        raise ParseError(f"record {rec.id}: split must be one of {SPLITS}")
    return rec


def parse_manifest(text: str, root=".", check_paths: bool = True) -> DatasetManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("classes"), list) \
            or not isinstance(doc.get("records"), list):
        raise ParseError("manifest needs a 'classes' list and a 'records' list")
    classes = [str(c) for c in doc["classes"]]
    if not doc["records"]:
        raise EmptyManifest("manifest has no records")
    records, seen = [], set()
    for raw in doc["records"]:
        rec = _parse_record(raw, len(classes))
        if rec.id in seen:
            raise DuplicateRecord(f"duplicate record id {rec.id}")
        seen.add(rec.id)
        records.append(rec)
    m = DatasetManifest(classes, records, Path(root))
    if check_paths:
        for r in records:
            if not m.image_path(r).is_file():
                raise MissingFile(f"record {r.id}: image {m.image_path(r)} not found")
    return m


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest {path} not found")
    return parse_manifest(path.read_text(), path.parent, check_paths)


def write_dataset(out_dir, train: LabeledImages, test: LabeledImages) -> DatasetManifest:
    """Store both splits as PNGs plus a manifest; ids run train first, then test."""
    out_dir = Path(out_dir)
    records = []
    for split, data in (("train", train), ("test", test)):
        for i in range(len(data)):
            rid = len(records)
            rel = f"images/{rid:06d}.png"
            save_png(out_dir / rel, data.images[i])
            label = int(data.labels[i])
            records.append(Record(rid, rel, label, caption_for(train.class_names[label]), split))
    m = DatasetManifest(list(train.class_names), records, out_dir)
    m.save(out_dir / MANIFEST_NAME)
    return m
