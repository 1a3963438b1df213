"""JSON config overlays for the dataclass configs, plus report provenance."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .. import __version__
from ..errors import MissingFile, ParseError


def read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ParseError("config must be a JSON object")
    return doc


def build(cls, overrides: dict | None = None, **fixed):
    """Instantiate dataclass ``cls`` from known keys of ``overrides``.

    Unknown keys are rejected so a typo cannot silently fall back to a default.
    """
    overrides = dict(overrides or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - names
    if unknown:
        raise ParseError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    overrides.update(fixed)
    return cls(**overrides)


def canonical(obj) -> str:
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_sha256(obj) -> str:
    return hashlib.sha256(canonical(obj).encode()).hexdigest()


def provenance(seed: int, config) -> dict:
    return {"seed": int(seed), "config_sha256": config_sha256(config), "tool_version": __version__}


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
