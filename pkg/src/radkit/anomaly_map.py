"""From fused patch grids to pixel-level anomaly maps and image-level scores."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .container import MAGIC_PACK, read_container, write_container
from .errors import ValidationError


@dataclass(eq=False)
class AnomalyResult:
    """Everything scoring one test image produces.

    ``layer_grids`` are the per-layer patch score grids, ``fused_grid`` their
    weighted fusion, ``pixel_map`` the upsampled map, ``image_score`` the
    pooled scalar. ``topk_images`` records the retrieved reference images and
    ``nn_ids`` the per-layer argmax row into the bank's layer store, for
    explainability.
    """

    layer_grids: dict[int, np.ndarray]
    fused_grid: np.ndarray
    pixel_map: np.ndarray
    image_score: float
    topk_images: np.ndarray
    nn_ids: dict[int, np.ndarray] = field(default_factory=dict)


def upsample_map(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling with the align-corners-false convention.

    Output pixel (i, j) samples the grid at ((i + 0.5) * H/H_px - 0.5,
    (j + 0.5) * W/W_px - 0.5), edge-clamped. Constants map to constants and
    the output range stays within the input range.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise ValidationError("grid must be a non-empty 2-D array")
    h, w = grid.shape
    th, tw = int(target[0]), int(target[1])
    if th < h or tw < w:
        raise ValidationError(
            f"target {target} smaller than grid {grid.shape}; upsampling only"
        )

    def axis_weights(n_in: int, n_out: int):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(src)
        t = src - lo
        i0 = np.clip(lo, 0, n_in - 1).astype(np.int64)
        i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.int64)
        return i0, i1, t

    r0, r1, tr = axis_weights(h, th)
    c0, c1, tc = axis_weights(w, tw)
    top = grid[r0][:, c0] * (1 - tc) + grid[r0][:, c1] * tc
    bot = grid[r1][:, c0] * (1 - tc) + grid[r1][:, c1] * tc
    return top * (1 - tr[:, None]) + bot * tr[:, None]


def image_score(pixel_map: np.ndarray, fraction: float = 0.01) -> float:
    """Mean of the ceil(fraction * P) largest pixel values.

    ``fraction=1`` is the plain mean. Permutation-invariant and monotone:
    raising any pixel never lowers the score.
    """
    arr = np.asarray(pixel_map, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValidationError("pixel map is empty")
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"pooling fraction {fraction} outside (0, 1]")
    k = math.ceil(fraction * arr.size)
    if k >= arr.size:
        return float(arr.mean())
    top = np.partition(arr, arr.size - k)[arr.size - k :]
    return float(top.mean())


def _palette_lut(palette: str) -> np.ndarray:
    import matplotlib

    try:
        cmap = matplotlib.colormaps[palette]
    except KeyError as exc:
        raise ValidationError(f"unknown palette {palette!r}") from exc
    lut = cmap(np.linspace(0.0, 1.0, 256))[:, :3]
    return (lut * 255.0 + 0.5).astype(np.uint8)


def render_heatmap(pixel_map: np.ndarray, palette: str = "inferno") -> bytes:
    """Min-max normalized colormap rendering of a map, as PNG bytes.

    Pure function of (map, palette): identical inputs give identical bytes.
    """
    arr = np.asarray(pixel_map, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValidationError("pixel map must be a non-empty 2-D array")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("pixel map contains NaN or infinite values")
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        normed = np.zeros_like(arr)
    else:
        normed = (arr - lo) / (hi - lo)
    indices = np.clip((normed * 255.0 + 0.5).astype(np.int64), 0, 255)
    rgb = _palette_lut(palette)[indices]

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_result(result: AnomalyResult, sink) -> int:
    """Persist an AnomalyResult in the per-image container format."""
    layer_ids = sorted(result.layer_grids)
    meta = {
        "image_score": float(result.image_score),
        "layer_ids": [int(l) for l in layer_ids],
    }
    tensors = [
        ("fused_grid", result.fused_grid.astype(np.float32)),
        ("pixel_map", result.pixel_map.astype(np.float32)),
        ("topk_images", np.asarray(result.topk_images, dtype=np.int64)),
    ]
    for lid in layer_ids:
        tensors.append((f"layer_{lid}_scores", result.layer_grids[lid].astype(np.float32)))
        if lid in result.nn_ids:
            tensors.append((f"layer_{lid}_nn", result.nn_ids[lid].astype(np.int64)))
    return write_container(sink, MAGIC_PACK, "anomaly_result", meta, tensors)


def load_result(source) -> AnomalyResult:
    kind, meta, tensors = read_container(source, MAGIC_PACK)
    if kind != "anomaly_result":
        raise ValidationError(f"container kind {kind!r} is not an anomaly result")
    layer_ids = [int(l) for l in meta["layer_ids"]]
    return AnomalyResult(
        layer_grids={lid: tensors[f"layer_{lid}_scores"] for lid in layer_ids},
        fused_grid=tensors["fused_grid"],
        pixel_map=tensors["pixel_map"],
        image_score=float(meta["image_score"]),
        topk_images=tensors["topk_images"],
        nn_ids={
            lid: tensors[f"layer_{lid}_nn"]
            for lid in layer_ids
            if f"layer_{lid}_nn" in tensors
        },
    )
