"""Feature-pack containers: one image's extracted features on disk and in memory.

A :class:`FeaturePack` holds an image's unit-norm global descriptor plus one
or more per-layer grids of unit-norm patch embeddings. Packs are immutable
value objects; the RADF file format round-trips them bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .container import MAGIC_PACK, read_container, write_container
from .errors import ValidationError

NORM_TOL = 1e-3

# Rows whose float64 norm is already this close to 1 are left untouched by
# l2_normalize_rows, which makes re-normalization idempotent on float32 data.
_SNAP_TOL = 4e-7

SPLITS = ("train", "test")
LABELS = ("normal", "anomalous")


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize the last axis of a float32 array, idempotently.

    Norms are computed in float64. Rows already unit-norm up to float32
    round-off are returned bit-unchanged so that normalizing twice equals
    normalizing once.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    x64 = x.astype(np.float64)
    norms = np.linalg.norm(x64, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValidationError("cannot normalize a zero vector")
    stale = np.abs(norms - 1.0) > _SNAP_TOL
    if not np.any(stale):
        return x
    return np.where(stale, (x64 / norms).astype(np.float32), x)


@dataclass(eq=False)
class LayerGrid:
    """One encoder layer's H x W grid of patch embeddings.

    ``data`` has shape (H, W, dim), float32, row-major, each patch vector
    unit-norm within :data:`NORM_TOL`.
    """

    layer_id: int
    data: np.ndarray

    @property
    def grid_shape(self) -> tuple[int, int]:
        return int(self.data.shape[0]), int(self.data.shape[1])

    @property
    def dim(self) -> int:
        return int(self.data.shape[2])


@dataclass(eq=False)
class FeaturePack:
    """All extracted features for one image, plus its dataset metadata."""

    image_id: str
    category: str
    split: str
    label: str
    global_descriptor: np.ndarray
    layers: list[LayerGrid]
    source_resolution: tuple[int, int]
    mask_ref: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def layer(self, layer_id: int) -> LayerGrid:
        for grid in self.layers:
            if grid.layer_id == layer_id:
                return grid
        raise ValidationError(f"pack {self.image_id!r} has no layer {layer_id}")

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(g.layer_id for g in self.layers)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.layers[0].grid_shape


def validate_pack(pack: FeaturePack) -> list[str]:
    """Return every invariant violation, each naming the failing field.

    An empty list means the pack is valid. Never mutates the pack.
    """
    violations: list[str] = []
    if not pack.image_id:
        violations.append("image_id: must be non-empty")
    if pack.split not in SPLITS:
        violations.append(f"split: {pack.split!r} not in {SPLITS}")
    if pack.label not in LABELS:
        violations.append(f"label: {pack.label!r} not in {LABELS}")

    g = np.asarray(pack.global_descriptor)
    if g.ndim != 1 or g.size == 0:
        violations.append("global_descriptor: must be a non-empty 1-D vector")
    elif g.dtype != np.float32:
        violations.append(
            f"global_descriptor: dtype {g.dtype.name}, expected float32"
        )
    else:
        norm = float(np.linalg.norm(g.astype(np.float64)))
        if abs(norm - 1.0) > NORM_TOL:
            violations.append(
                f"global_descriptor: norm {norm:.6f} outside 1 +/- {NORM_TOL}"
            )

    res = tuple(pack.source_resolution)
    if len(res) != 2 or any(int(r) < 1 for r in res):
        violations.append("source_resolution: must be two positive integers")

    if not pack.layers:
        violations.append("layers must be non-empty")
        return violations

    ids = [grid.layer_id for grid in pack.layers]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        violations.append(f"layers: ids {ids} not strictly increasing")

    base_shape = None
    for idx, grid in enumerate(pack.layers):
        path = f"layers[{idx}] (layer {grid.layer_id})"
        data = np.asarray(grid.data)
        if data.ndim != 3 or data.shape[0] < 1 or data.shape[1] < 1:
            violations.append(f"{path}.data: expected (H, W, dim) with H, W >= 1")
            continue
        if data.dtype != np.float32:
            violations.append(f"{path}.data: dtype {data.dtype.name}, expected float32")
            continue
        if base_shape is None:
            base_shape = data.shape[:2]
        elif data.shape[:2] != base_shape:
            violations.append(
                f"{path}.data: grid {data.shape[:2]} differs from {tuple(base_shape)}"
            )
        norms = np.linalg.norm(data.astype(np.float64), axis=2)
        bad = np.argwhere(np.abs(norms - 1.0) > NORM_TOL)
        for h, w in bad:
            violations.append(
                f"{path}.data[{h},{w}]: norm {norms[h, w]:.6f} outside 1 +/- {NORM_TOL}"
            )
    return violations


def _require_valid(pack: FeaturePack) -> None:
    violations = validate_pack(pack)
    if violations:
        raise ValidationError("; ".join(violations))


def write_feature_pack(pack: FeaturePack, sink) -> int:
    """Serialize a valid pack to the RADF container; returns bytes written.

    Output is byte-identical for identical packs.
    """
    _require_valid(pack)
    meta = {
        "image_id": pack.image_id,
        "category": pack.category,
        "split": pack.split,
        "label": pack.label,
        "mask_ref": pack.mask_ref,
        "source_resolution": [int(r) for r in pack.source_resolution],
        "layer_ids": [int(g.layer_id) for g in pack.layers],
        "extra": pack.extra,
    }
    tensors = [("global_descriptor", pack.global_descriptor)]
    tensors += [(f"layer_{g.layer_id}", g.data) for g in pack.layers]
    return write_container(sink, MAGIC_PACK, "feature_pack", meta, tensors)


def read_feature_pack(source) -> FeaturePack:
    """Read a RADF feature pack; the result always passes :func:`validate_pack`.

    Tensor bytes are returned exactly as stored (drift within the validation
    tolerance is accepted as-is), so read is the exact inverse of write.
    """
    kind, meta, tensors = read_container(source, MAGIC_PACK)
    if kind != "feature_pack":
        raise ValidationError(f"container kind {kind!r} is not a feature pack")
    try:
        layers = [
            LayerGrid(layer_id=int(lid), data=tensors[f"layer_{lid}"])
            for lid in meta["layer_ids"]
        ]
        pack = FeaturePack(
            image_id=meta["image_id"],
            category=meta["category"],
            split=meta["split"],
            label=meta["label"],
            global_descriptor=tensors["global_descriptor"],
            layers=layers,
            source_resolution=tuple(meta["source_resolution"]),
            mask_ref=meta.get("mask_ref"),
            extra=meta.get("extra", {}),
        )
    except KeyError as exc:
        raise ValidationError(f"feature pack missing field {exc}") from exc
    _require_valid(pack)
    return pack


def packs_equal(a: FeaturePack, b: FeaturePack) -> bool:
    """Bit-exact equality of two packs (metadata and tensors)."""
    if (
        a.image_id != b.image_id
        or a.category != b.category
        or a.split != b.split
        or a.label != b.label
        or a.mask_ref != b.mask_ref
        or tuple(a.source_resolution) != tuple(b.source_resolution)
        or a.extra != b.extra
        or a.layer_ids != b.layer_ids
    ):
        return False
    if a.global_descriptor.tobytes() != b.global_descriptor.tobytes():
        return False
    return all(
        ga.data.shape == gb.data.shape and ga.data.tobytes() == gb.data.tobytes()
        for ga, gb in zip(a.layers, b.layers)
    )


def save_pixel_map(pixel_map: np.ndarray, sink) -> int:
    """Export a pixel map as a single-tensor RADF file."""
    arr = np.ascontiguousarray(pixel_map, dtype=np.float32)
    if arr.ndim != 2:
        raise ValidationError("pixel map must be 2-D")
    return write_container(
        sink, MAGIC_PACK, "pixel_map", {"shape": list(arr.shape)}, [("pixel_map", arr)]
    )


def load_pixel_map(source) -> np.ndarray:
    kind, _meta, tensors = read_container(source, MAGIC_PACK)
    if kind != "pixel_map":
        raise ValidationError(f"container kind {kind!r} is not a pixel map")
    return tensors["pixel_map"]


def save_mask(mask: np.ndarray, sink) -> int:
    """Store a binary ground-truth mask as a single-tensor RADF file."""
    arr = np.ascontiguousarray(np.asarray(mask, dtype=np.float32))
    if arr.ndim != 2:
        raise ValidationError("mask must be 2-D")
    return write_container(
        sink, MAGIC_PACK, "mask", {"shape": list(arr.shape)}, [("mask", arr)]
    )


def load_mask(source) -> np.ndarray:
    kind, _meta, tensors = read_container(source, MAGIC_PACK)
    if kind != "mask":
        raise ValidationError(f"container kind {kind!r} is not a mask")
    return tensors["mask"] > 0.5
