"""Dataset manifests: a directory of RADF packs plus one JSON index.

The manifest lists every image's pack path, category, split, label, and mask
path. All paths are stored relative to the manifest file's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ValidationError
from .feature_io import (
    FeaturePack,
    load_mask,
    read_feature_pack,
    save_mask,
    write_feature_pack,
)

MANIFEST_NAME = "manifest.json"


@dataclass
class ManifestEntry:
    image_id: str
    category: str
    split: str
    label: str
    pack_path: str
    mask_path: Optional[str] = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]

    def select(self, split: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries if split is None or e.split == split]

    def load_pack(self, entry: ManifestEntry) -> FeaturePack:
        with open(self.root / entry.pack_path, "rb") as fh:
            return read_feature_pack(fh)

    def load_packs(self, split: str | None = None) -> list[FeaturePack]:
        return [self.load_pack(e) for e in self.select(split)]

    def load_mask(self, entry: ManifestEntry) -> Optional[np.ndarray]:
        if entry.mask_path is None:
            return None
        with open(self.root / entry.mask_path, "rb") as fh:
            return load_mask(fh)

    @property
    def categories(self) -> list[str]:
        return sorted({e.category for e in self.entries})


def write_dataset(
    out_dir: str | os.PathLike,
    packs: Iterable[FeaturePack],
    masks: dict[str, np.ndarray] | None = None,
) -> Path:
    """Write packs (and masks) under ``out_dir`` and emit the manifest.

    Returns the manifest path. Layout: ``packs/<image_id>.radf`` and
    ``masks/<image_id>.radf``.
    """
    root = Path(out_dir)
    (root / "packs").mkdir(parents=True, exist_ok=True)
    masks = masks or {}
    if masks:
        (root / "masks").mkdir(parents=True, exist_ok=True)

    records = []
    for pack in packs:
        rel_pack = f"packs/{pack.image_id}.radf"
        with open(root / rel_pack, "wb") as fh:
            write_feature_pack(pack, fh)
        rel_mask = None
        if pack.image_id in masks:
            rel_mask = f"masks/{pack.image_id}.radf"
            with open(root / rel_mask, "wb") as fh:
                save_mask(masks[pack.image_id], fh)
        records.append(
            {
                "image_id": pack.image_id,
                "category": pack.category,
                "split": pack.split,
                "label": pack.label,
                "pack": rel_pack,
                "mask": rel_mask,
            }
        )

    manifest_path = root / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump({"images": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Load a manifest; ``RAD_DATA_DIR`` is tried when ``path`` is not found."""
    p = Path(path)
    if not p.exists():
        data_dir = os.environ.get("RAD_DATA_DIR")
        if data_dir and not p.is_absolute():
            candidate = Path(data_dir) / p
            if candidate.exists():
                p = candidate
    if not p.exists():
        raise ValidationError(f"manifest not found: {path}")
    if p.is_dir():
        p = p / MANIFEST_NAME
        if not p.exists():
            raise ValidationError(f"no {MANIFEST_NAME} in directory: {path}")
    with open(p, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"manifest is not valid JSON: {exc}") from exc
    if "images" not in data:
        raise ValidationError("manifest missing 'images' list")
    entries = [
        ManifestEntry(
            image_id=rec["image_id"],
            category=rec["category"],
            split=rec["split"],
            label=rec["label"],
            pack_path=rec["pack"],
            mask_path=rec.get("mask"),
        )
        for rec in data["images"]
    ]
    return DatasetManifest(root=p.parent, entries=entries)
