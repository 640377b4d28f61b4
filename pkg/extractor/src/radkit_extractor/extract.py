"""Image preprocessing and feature-pack extraction.

Preprocessing follows the fixed recipe: square resize (bicubic) to the
configured edge, center crop, scale to [0, 1], channel-wise normalization
with the backbone's published constants. Grayscale inputs are replicated to
three channels. Ground-truth masks go through the same resize/crop geometry
with nearest-neighbor interpolation so they stay aligned with the crops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from radkit import (
    FeaturePack,
    LayerGrid,
    l2_normalize_rows,
    save_mask,
    validate_pack,
    write_feature_pack,
)
from radkit.errors import ValidationError

from .backbones import DEFAULT_BACKBONE, Backbone, load_backbone


@dataclass
class ExtractorConfig:
    backbone: str = DEFAULT_BACKBONE
    layers: tuple[int, ...] = (4, 7, 10, 12)
    resize: int = 512
    crop: int = 448
    mean: tuple[float, float, float] | None = None  # None: backbone default
    std: tuple[float, float, float] | None = None
    batch_size: int = 8
    device: str = "cpu"

    def validate(self, backbone: Backbone | None = None) -> None:
        if self.crop > self.resize:
            raise ValidationError(
                f"crop {self.crop} must not exceed resize {self.resize}"
            )
        if self.crop < 1 or not self.layers or self.batch_size < 1:
            raise ValidationError("crop, layers and batch_size must be non-trivial")
        if backbone is not None:
            if self.crop % backbone.patch_size:
                raise ValidationError(
                    f"crop {self.crop} not divisible by patch size {backbone.patch_size}"
                )
            bad = [l for l in self.layers if not 1 <= l <= backbone.depth]
            if bad:
                raise ValidationError(
                    f"layer ids {bad} invalid for {backbone.name!r} "
                    f"(depth {backbone.depth})"
                )


def _load_rgb(path: Path) -> Image.Image:
    try:
        image = Image.open(path)
        image.load()
    except Exception as exc:
        raise ValidationError(f"unreadable image {path}: {exc}") from exc
    # "RGB" conversion replicates single-channel inputs across channels
    return image.convert("RGB")


def _geometry(image: Image.Image, resize: int, crop: int, nearest: bool) -> Image.Image:
    resample = Image.Resampling.NEAREST if nearest else Image.Resampling.BICUBIC
    resized = image.resize((resize, resize), resample)
    left = (resize - crop) // 2
    return resized.crop((left, left, left + crop, left + crop))


def preprocess(path: Path, config: ExtractorConfig, backbone: Backbone) -> torch.Tensor:
    """One image to a normalized (3, crop, crop) float32 tensor."""
    image = _geometry(_load_rgb(path), config.resize, config.crop, nearest=False)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    mean = np.asarray(config.mean or backbone.mean, dtype=np.float32)
    std = np.asarray(config.std or backbone.std, dtype=np.float32)
    arr = (arr - mean) / std
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def preprocess_mask(path: Path, config: ExtractorConfig) -> np.ndarray:
    mask = _geometry(
        Image.open(path).convert("L"), config.resize, config.crop, nearest=True
    )
    return np.asarray(mask) > 127


def _to_pack(
    image_id: str,
    category: str,
    split: str,
    label: str,
    mask_ref: str | None,
    cls_vec: np.ndarray,
    grids: dict[int, np.ndarray],
    config: ExtractorConfig,
    backbone: Backbone,
) -> FeaturePack:
    layers = [
        LayerGrid(layer_id=lid, data=l2_normalize_rows(grids[lid].astype(np.float32)))
        for lid in sorted(grids)
    ]
    pack = FeaturePack(
        image_id=image_id,
        category=category,
        split=split,
        label=label,
        global_descriptor=l2_normalize_rows(cls_vec.astype(np.float32)),
        layers=layers,
        source_resolution=(config.crop, config.crop),
        mask_ref=mask_ref,
        extra={
            "backbone": backbone.name,
            "resize": config.resize,
            "crop": config.crop,
            "mean": list(config.mean or backbone.mean),
            "std": list(config.std or backbone.std),
        },
    )
    violations = validate_pack(pack)
    if violations:
        raise ValidationError(f"extracted pack invalid: {violations[0]}")
    return pack


def extract_single(
    image_path: str | Path,
    config: ExtractorConfig,
    backbone: Backbone | None = None,
    image_id: str | None = None,
    category: str = "unknown",
    split: str = "test",
    label: str = "normal",
) -> FeaturePack:
    """Extract one image into a feature pack (used by the one-reference demo)."""
    backbone = backbone or load_backbone(config.backbone, config.device)
    config.validate(backbone)
    path = Path(image_path)
    batch = preprocess(path, config, backbone).unsqueeze(0)
    cls, grids = backbone.extract(batch, config.layers)
    return _to_pack(
        image_id or path.stem,
        category,
        split,
        label,
        None,
        cls[0],
        {lid: g[0] for lid, g in grids.items()},
        config,
        backbone,
    )


@dataclass
class _Item:
    image_id: str
    category: str
    split: str
    label: str
    path: Path
    mask_path: Path | None = None


def _scan_mvtec_layout(root: Path) -> list[_Item]:
    """MVTec-style tree: <category>/<split>/<defect>/<image>, masks under
    <category>/ground_truth/<defect>/<stem>_mask.<ext>."""
    items: list[_Item] = []
    categories = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not categories:
        raise ValidationError(f"no category directories under {root}")
    for category in categories:
        for split in ("train", "test"):
            split_dir = root / category / split
            if not split_dir.is_dir():
                continue
            for defect_dir in sorted(split_dir.iterdir()):
                if not defect_dir.is_dir():
                    continue
                defect = defect_dir.name
                label = "normal" if defect == "good" else "anomalous"
                for image_path in sorted(defect_dir.iterdir()):
                    if image_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
                        continue
                    image_id = f"{category}_{split}_{defect}_{image_path.stem}"
                    mask_path = None
                    if label == "anomalous":
                        gt_dir = root / category / "ground_truth" / defect
                        candidates = [
                            gt_dir / f"{image_path.stem}_mask{image_path.suffix}",
                            gt_dir / f"{image_path.stem}_mask.png",
                            gt_dir / f"{image_path.stem}{image_path.suffix}",
                        ]
                        mask_path = next((c for c in candidates if c.exists()), None)
                        if split == "test" and mask_path is None:
                            raise ValidationError(
                                f"missing ground-truth mask for anomalous image "
                                f"{image_path}"
                            )
                    items.append(
                        _Item(image_id, category, split, label, image_path, mask_path)
                    )
    if not items:
        raise ValidationError(f"no images found under {root}")
    return items


def extract_dataset(
    dataset_dir: str | Path,
    config: ExtractorConfig,
    out_dir: str | Path,
    progress: bool = False,
) -> Path:
    """Extract every image of an MVTec-style dataset into RADF packs.

    Writes ``packs/``, ``masks/`` and ``manifest.json`` under ``out_dir`` in
    the layout the primary CLI consumes; returns the manifest path.
    Deterministic for a fixed (dataset, config) on one machine.
    """
    backbone = load_backbone(config.backbone, config.device)
    config.validate(backbone)
    root = Path(dataset_dir)
    if not root.is_dir():
        raise ValidationError(f"dataset directory not found: {dataset_dir}")
    items = _scan_mvtec_layout(root)

    out = Path(out_dir)
    (out / "packs").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    records = []
    for start in range(0, len(items), config.batch_size):
        chunk = items[start : start + config.batch_size]
        batch = torch.stack([preprocess(it.path, config, backbone) for it in chunk])
        cls, grids = backbone.extract(batch, config.layers)
        for row, item in enumerate(chunk):
            rel_mask = None
            if item.mask_path is not None:
                rel_mask = f"masks/{item.image_id}.radf"
                with open(out / rel_mask, "wb") as fh:
                    save_mask(preprocess_mask(item.mask_path, config), fh)
            pack = _to_pack(
                item.image_id,
                item.category,
                item.split,
                item.label,
                rel_mask,
                cls[row],
                {lid: g[row] for lid, g in grids.items()},
                config,
                backbone,
            )
            rel_pack = f"packs/{item.image_id}.radf"
            with open(out / rel_pack, "wb") as fh:
                write_feature_pack(pack, fh)
            records.append(
                {
                    "image_id": item.image_id,
                    "category": item.category,
                    "split": item.split,
                    "label": item.label,
                    "pack": rel_pack,
                    "mask": rel_mask,
                }
            )
        if progress:
            print(f"\rextracted {min(start + config.batch_size, len(items))}/{len(items)}", end="")
    if progress:
        print()

    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump({"images": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
