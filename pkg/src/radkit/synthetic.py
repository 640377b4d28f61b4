"""Synthetic feature datasets with plantable, provably separable anomalies.

Normal patches are drawn near a position-specific unit prototype with a
bounded angular jitter; anomalous patches are rejection-sampled to sit at
least ``margin`` away (Euclidean, on the unit sphere) from every prototype in
the spatial neighborhood of their position, across all categories. With
margin m and jitter j this guarantees

    1-NN cosine score of any normal patch    <= 2 * j**2
    1-NN cosine score of any planted patch   >= (m - j)**2 / 2

so planted patches are strictly separable whenever (m - j)^2 > 4 * j^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .feature_io import FeaturePack, LayerGrid


@dataclass
class SynthSpec:
    """Shape and difficulty knobs for a generated dataset."""

    categories: int = 3
    train_per_category: int = 20
    test_per_category: int = 10
    grid: tuple[int, int] = (8, 8)
    layer_dims: dict[int, int] = field(default_factory=lambda: {4: 16, 7: 16})
    global_dim: int = 16
    anomaly_fraction: float = 0.5
    anomaly_patches: int = 4
    margin: float = 0.8
    jitter: float = 0.1
    rho: int = 1
    source_resolution: tuple[int, int] = (96, 96)
    # Optional difficulty cap: planted patches stay within this Euclidean
    # distance of their own position prototype, so anomalies hug the margin
    # instead of landing in remote parts of the sphere.
    anomaly_ceiling: float | None = None

    def validate(self) -> None:
        if self.margin >= 2.0:
            raise ValidationError(f"margin {self.margin} infeasible: must be < 2")
        if not 0.0 < self.margin:
            raise ValidationError("margin must be positive")
        if self.anomaly_ceiling is not None and not (
            self.margin < self.anomaly_ceiling < 2.0
        ):
            raise ValidationError("anomaly_ceiling must lie in (margin, 2)")
        if not 0.0 <= self.jitter < 1.0:
            raise ValidationError("jitter must be in [0, 1)")
        if self.categories < 1 or self.train_per_category < 1:
            raise ValidationError("need at least one category and one train image")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ValidationError("anomaly_fraction must be in [0, 1]")
        h, w = self.grid
        if h < 1 or w < 1 or not self.layer_dims:
            raise ValidationError("grid must be non-empty and layer_dims non-empty")
        if self.anomaly_patches < 1 or self.anomaly_patches > h * w:
            raise ValidationError("anomaly_patches must fit inside the grid")
        if min(self.layer_dims.values()) < 4 or self.global_dim < 4:
            raise ValidationError("embedding dims below 4 make margins infeasible")
        hp, wp = self.source_resolution
        if hp % h or wp % w:
            raise ValidationError("source_resolution must be divisible by the grid")


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _jitter_on_sphere(rng: np.random.Generator, p: np.ndarray, chord: float) -> np.ndarray:
    """A unit vector at Euclidean distance <= ``chord`` from unit vector ``p``."""
    if chord <= 0.0:
        return p.copy()
    t = rng.standard_normal(p.size)
    t -= np.dot(t, p) * p
    t_norm = np.linalg.norm(t)
    if t_norm == 0.0:
        return p.copy()
    t /= t_norm
    theta = rng.uniform(0.0, 2.0 * math.asin(chord / 2.0))
    return math.cos(theta) * p + math.sin(theta) * t


def _category_prototypes(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Unit prototypes with pairwise cosine <= 0.5 so top-K retrieval cannot
    confuse categories."""
    protos: list[np.ndarray] = []
    for _ in range(n):
        for _attempt in range(10_000):
            cand = _unit(rng, dim)
            if all(abs(float(np.dot(cand, p))) <= 0.5 for p in protos):
                protos.append(cand)
                break
        else:
            raise ValidationError(
                f"could not place {n} separated category prototypes in dim {dim}"
            )
    return np.stack(protos)


def _anomalous_direction(
    rng: np.random.Generator,
    protos: np.ndarray,
    own_proto: np.ndarray,
    margin: float,
    ceiling: float | None,
) -> np.ndarray:
    """A unit vector >= margin away from every row of ``protos``.

    With a ceiling, candidates are drawn on the spherical shell at chord
    distance [margin, ceiling] around the position's own prototype, keeping
    planted anomalies near the decision margin.
    """
    dim = protos.shape[-1]
    flat = protos.reshape(-1, dim)
    # ||u - p|| >= m  <=>  <u, p> <= 1 - m^2 / 2
    max_cos = 1.0 - margin * margin / 2.0
    for _attempt in range(100_000):
        if ceiling is None:
            cand = _unit(rng, dim)
        else:
            chord = rng.uniform(margin, ceiling)
            cand = _jitter_at_chord(rng, own_proto, chord)
        if float(np.max(flat @ cand)) <= max_cos:
            return cand
    raise ValidationError(
        f"margin {margin} infeasible against {flat.shape[0]} prototypes in dim {dim}"
    )


def _jitter_at_chord(rng: np.random.Generator, p: np.ndarray, chord: float) -> np.ndarray:
    """A unit vector at exactly chord distance from unit vector ``p``."""
    t = rng.standard_normal(p.size)
    t -= np.dot(t, p) * p
    t /= np.linalg.norm(t)
    theta = 2.0 * math.asin(chord / 2.0)
    return math.cos(theta) * p + math.sin(theta) * t


def _block_shape(count: int, h: int, w: int) -> tuple[int, int]:
    """Most-square (rows, cols) factorization of ``count`` that fits the grid."""
    best = None
    for r in range(1, count + 1):
        if count % r:
            continue
        c = count // r
        if r <= h and c <= w:
            score = abs(r - c)
            if best is None or score < best[0]:
                best = (score, r, c)
    if best is None:
        raise ValidationError(
            f"anomaly_patches={count} has no factorization fitting a {h}x{w} grid"
        )
    return best[1], best[2]


def generate_synthetic_dataset(
    spec: SynthSpec, seed: int
) -> tuple[list[FeaturePack], list[FeaturePack], dict[str, np.ndarray]]:
    """Build (train packs, test packs, masks) deterministically from ``seed``.

    ``masks`` maps the image_id of each anomalous test image to a boolean
    pixel mask at ``spec.source_resolution`` marking the planted patches.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.grid
    hp, wp = spec.source_resolution
    cell_h, cell_w = hp // h, wp // w
    layer_ids = sorted(spec.layer_dims)

    global_protos = _category_prototypes(rng, spec.categories, spec.global_dim)
    # patch prototypes: per layer, array of shape (categories, H, W, dim)
    patch_protos = {
        lid: np.stack(
            [
                np.stack(
                    [
                        np.stack([_unit(rng, spec.layer_dims[lid]) for _ in range(w)])
                        for _ in range(h)
                    ]
                )
                for _ in range(spec.categories)
            ]
        )
        for lid in layer_ids
    }

    def neighborhood_protos(lid: int, hh: int, ww: int) -> np.ndarray:
        h0, h1 = max(0, hh - spec.rho), min(h, hh + spec.rho + 1)
        w0, w1 = max(0, ww - spec.rho), min(w, ww + spec.rho + 1)
        return patch_protos[lid][:, h0:h1, w0:w1, :]

    def make_pack(cat: int, split: str, idx: int, planted: np.ndarray | None) -> FeaturePack:
        name = f"cat{cat:02d}"
        label = "anomalous" if planted is not None else "normal"
        grids = []
        for lid in layer_ids:
            data = np.empty((h, w, spec.layer_dims[lid]), dtype=np.float32)
            for hh in range(h):
                for ww in range(w):
                    if planted is not None and planted[hh, ww]:
                        vec = _anomalous_direction(
                            rng,
                            neighborhood_protos(lid, hh, ww),
                            patch_protos[lid][cat, hh, ww],
                            spec.margin,
                            spec.anomaly_ceiling,
                        )
                    else:
                        vec = _jitter_on_sphere(
                            rng, patch_protos[lid][cat, hh, ww], spec.jitter
                        )
                    data[hh, ww] = vec.astype(np.float32)
            grids.append(LayerGrid(layer_id=lid, data=data))
        image_id = f"{name}_{split}_{idx:04d}"
        return FeaturePack(
            image_id=image_id,
            category=name,
            split=split,
            label=label,
            global_descriptor=_jitter_on_sphere(
                rng, global_protos[cat], spec.jitter
            ).astype(np.float32),
            layers=grids,
            source_resolution=spec.source_resolution,
            mask_ref=f"{image_id}_mask" if planted is not None else None,
        )

    train_packs = [
        make_pack(cat, "train", i, None)
        for cat in range(spec.categories)
        for i in range(spec.train_per_category)
    ]

    test_packs: list[FeaturePack] = []
    masks: dict[str, np.ndarray] = {}
    n_anom = int(round(spec.anomaly_fraction * spec.test_per_category))
    block_h, block_w = _block_shape(spec.anomaly_patches, h, w)
    for cat in range(spec.categories):
        for i in range(spec.test_per_category):
            planted = None
            if i < n_anom:
                planted = np.zeros((h, w), dtype=bool)
                top = int(rng.integers(0, h - block_h + 1))
                left = int(rng.integers(0, w - block_w + 1))
                planted[top : top + block_h, left : left + block_w] = True
            pack = make_pack(cat, "test", i, planted)
            test_packs.append(pack)
            if planted is not None:
                masks[pack.image_id] = np.kron(
                    planted, np.ones((cell_h, cell_w), dtype=bool)
                )
    return train_packs, test_packs, masks
