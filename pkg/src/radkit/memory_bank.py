"""The anomaly-free reference store and its scaling/few-shot selection rules.

A bank holds one global descriptor row per image and, for each configured
encoder layer, every patch embedding of every image. Patch rows are laid out
position-major (all images' patches at grid cell 0, then cell 1, ...), which
makes the spatial neighborhood scan during retrieval touch contiguous ranges.

Banks are immutable after construction; ``add_images`` returns a new bank
that is exactly equal to rebuilding from the concatenated pack list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .container import MAGIC_BANK, read_container, write_container
from .errors import ValidationError
from .feature_io import FeaturePack, l2_normalize_rows, validate_pack

MODES = ("single_class", "multi_class", "incremental_class", "few_shot")


@dataclass
class ScalingProtocol:
    """How much anomaly-free data enters the bank, and how it is chosen."""

    mode: str
    tau: float = 1.0
    shots: int = 1
    base_categories: tuple[str, ...] = ()
    target_category: Optional[str] = None
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode {self.mode!r} not in {MODES}")
        if not 0.0 < self.tau <= 1.0:
            raise ValidationError(f"tau {self.tau} outside (0, 1]")
        if self.shots < 1:
            raise ValidationError(f"shots {self.shots} must be >= 1")
        if self.mode == "incremental_class":
            if not self.base_categories or self.target_category is None:
                raise ValidationError(
                    "incremental_class needs base_categories and target_category"
                )
            if self.target_category in self.base_categories:
                raise ValidationError(
                    "incremental_class base and target categories must be disjoint"
                )


@dataclass(eq=False)
class LayerStore:
    """All patch rows of one layer, position-major, with provenance arrays."""

    layer_id: int
    patches: np.ndarray      # (N*H*W, dim) float32, unit rows
    image_index: np.ndarray  # (N*H*W,) int32, i(n)
    coords: np.ndarray       # (N*H*W, 2) int32, (h_n, w_n)

    @property
    def dim(self) -> int:
        return int(self.patches.shape[1])


@dataclass(eq=False)
class MemoryBank:
    globals: np.ndarray              # (N, d_g) float32, unit rows
    image_ids: list[str]
    categories: list[str]
    grid: tuple[int, int]
    layer_stores: dict[int, LayerStore]
    position_index: np.ndarray = field(default=None)  # (H*W, 2) int64 [start, stop)

    def __post_init__(self):
        if self.position_index is None:
            h, w = self.grid
            n = self.num_images
            self.position_index = np.stack(
                [
                    np.arange(h * w, dtype=np.int64) * n,
                    (np.arange(h * w, dtype=np.int64) + 1) * n,
                ],
                axis=1,
            )

    @property
    def num_images(self) -> int:
        return int(self.globals.shape[0])

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.layer_stores))

    def position_range(self, h: int, w: int) -> tuple[int, int]:
        gh, gw = self.grid
        if not (0 <= h < gh and 0 <= w < gw):
            raise ValidationError(f"position ({h}, {w}) outside grid {self.grid}")
        start, stop = self.position_index[h * gw + w]
        return int(start), int(stop)


def build_bank(packs: Sequence[FeaturePack], layers: Iterable[int]) -> MemoryBank:
    """Assemble a bank from valid packs sharing one grid and the given layers.

    Embeddings are re-normalized on ingest (idempotent on already-unit data).
    The result is a pure function of the pack sequence and layer set.
    """
    packs = list(packs)
    layer_ids = sorted(set(int(l) for l in layers))
    if not packs:
        raise ValidationError("empty bank: no packs given")
    if not layer_ids:
        raise ValidationError("empty bank: no layers given")

    grid = packs[0].grid_shape
    for pack in packs:
        violations = validate_pack(pack)
        if violations:
            raise ValidationError(
                f"pack {pack.image_id!r} invalid: {violations[0]}"
            )
        if pack.grid_shape != grid:
            raise ValidationError(
                f"pack {pack.image_id!r} grid {pack.grid_shape} != bank grid {grid}"
            )
        missing = set(layer_ids) - set(pack.layer_ids)
        if missing:
            raise ValidationError(
                f"pack {pack.image_id!r} missing layers {sorted(missing)}"
            )

    n = len(packs)
    h, w = grid
    globals_ = l2_normalize_rows(
        np.stack([p.global_descriptor for p in packs]).astype(np.float32)
    )

    stores = {}
    for lid in layer_ids:
        stacked = np.stack([p.layer(lid).data for p in packs])  # (N, H, W, d)
        dim = stacked.shape[3]
        position_major = np.ascontiguousarray(
            stacked.transpose(1, 2, 0, 3).reshape(h * w * n, dim)
        )
        stores[lid] = LayerStore(
            layer_id=lid,
            patches=l2_normalize_rows(position_major),
            image_index=np.tile(np.arange(n, dtype=np.int32), h * w),
            coords=np.repeat(
                np.stack(
                    np.meshgrid(
                        np.arange(h, dtype=np.int32),
                        np.arange(w, dtype=np.int32),
                        indexing="ij",
                    ),
                    axis=-1,
                ).reshape(h * w, 2),
                n,
                axis=0,
            ),
        )

    return MemoryBank(
        globals=globals_,
        image_ids=[p.image_id for p in packs],
        categories=[p.category for p in packs],
        grid=grid,
        layer_stores=stores,
    )


def add_images(bank: MemoryBank, packs: Sequence[FeaturePack]) -> MemoryBank:
    """Extend a bank; equals ``build_bank(original ∪ new)`` exactly."""
    packs = list(packs)
    if not packs:
        return bank
    grid = bank.grid
    for pack in packs:
        violations = validate_pack(pack)
        if violations:
            raise ValidationError(f"pack {pack.image_id!r} invalid: {violations[0]}")
        if pack.grid_shape != grid:
            raise ValidationError(
                f"pack {pack.image_id!r} grid {pack.grid_shape} != bank grid {grid}"
            )
        missing = set(bank.layer_ids) - set(pack.layer_ids)
        if missing:
            raise ValidationError(
                f"pack {pack.image_id!r} missing layers {sorted(missing)}"
            )

    n_old, n_new = bank.num_images, len(packs)
    n = n_old + n_new
    h, w = grid
    globals_ = np.concatenate(
        [
            bank.globals,
            l2_normalize_rows(
                np.stack([p.global_descriptor for p in packs]).astype(np.float32)
            ),
        ]
    )

    stores = {}
    for lid, old in bank.layer_stores.items():
        stacked = np.stack([p.layer(lid).data for p in packs])
        new_rows = l2_normalize_rows(
            np.ascontiguousarray(
                stacked.transpose(1, 2, 0, 3).reshape(h * w * n_new, old.dim)
            )
        )
        patches = np.concatenate(
            [
                old.patches.reshape(h * w, n_old, old.dim),
                new_rows.reshape(h * w, n_new, old.dim),
            ],
            axis=1,
        ).reshape(h * w * n, old.dim)
        image_index = np.concatenate(
            [
                old.image_index.reshape(h * w, n_old),
                np.tile(np.arange(n_old, n, dtype=np.int32), (h * w, 1)),
            ],
            axis=1,
        ).reshape(-1)
        coords = np.repeat(
            old.coords.reshape(h * w, n_old, 2)[:, 0, :], n, axis=0
        ).reshape(h * w * n, 2)
        stores[lid] = LayerStore(
            layer_id=lid,
            patches=np.ascontiguousarray(patches),
            image_index=image_index,
            coords=coords,
        )

    return MemoryBank(
        globals=globals_,
        image_ids=bank.image_ids + [p.image_id for p in packs],
        categories=bank.categories + [p.category for p in packs],
        grid=grid,
        layer_stores=stores,
    )


def subsample_bank(
    packs: Sequence[FeaturePack], protocol: ScalingProtocol
) -> list[FeaturePack]:
    """Select the anomaly-free packs a scaling or few-shot protocol admits.

    Counts use the ceiling rule ceil(tau * N) so tau > 0 never empties a
    class. Shuffles are seeded and the selection depends only on
    (packs, mode, tau/shots, seed); selected packs keep their input order.
    """
    protocol.validate()
    packs = list(packs)
    by_category: dict[str, list[int]] = {}
    for idx, pack in enumerate(packs):
        by_category.setdefault(pack.category, []).append(idx)

    rng = np.random.default_rng(protocol.seed)

    def pick(indices: list[int], count: int) -> set[int]:
        order = list(indices)
        rng.shuffle(order)
        return set(order[:count])

    selected: set[int] = set()
    if protocol.mode == "single_class":
        for cat in sorted(by_category):
            idxs = by_category[cat]
            selected |= pick(idxs, math.ceil(protocol.tau * len(idxs)))
    elif protocol.mode == "multi_class":
        selected = pick(list(range(len(packs))), math.ceil(protocol.tau * len(packs)))
    elif protocol.mode == "few_shot":
        for cat in sorted(by_category):
            idxs = by_category[cat]
            selected |= pick(idxs, min(protocol.shots, len(idxs)))
    else:  # incremental_class
        known = set(by_category)
        for cat in list(protocol.base_categories) + [protocol.target_category]:
            if cat not in known:
                raise ValidationError(f"unknown category {cat!r}")
        for cat in protocol.base_categories:
            selected |= set(by_category[cat])
        target = by_category[protocol.target_category]
        selected |= pick(target, math.ceil(protocol.tau * len(target)))

    return [packs[i] for i in range(len(packs)) if i in selected]


def save_bank(bank: MemoryBank, sink) -> int:
    """Serialize a bank to the RADB container (bit-exact round trip)."""
    meta = {
        "image_ids": bank.image_ids,
        "categories": bank.categories,
        "grid": [int(g) for g in bank.grid],
        "layer_ids": [int(l) for l in bank.layer_ids],
    }
    tensors = [
        ("globals", bank.globals),
        ("position_index", bank.position_index),
    ]
    for lid in bank.layer_ids:
        store = bank.layer_stores[lid]
        tensors.append((f"layer_{lid}_patches", store.patches))
        tensors.append((f"layer_{lid}_image_index", store.image_index))
        tensors.append((f"layer_{lid}_coords", store.coords))
    return write_container(sink, MAGIC_BANK, "memory_bank", meta, tensors)


def load_bank(source) -> MemoryBank:
    kind, meta, tensors = read_container(source, MAGIC_BANK)
    if kind != "memory_bank":
        raise ValidationError(f"container kind {kind!r} is not a memory bank")
    try:
        grid = (int(meta["grid"][0]), int(meta["grid"][1]))
        stores = {
            int(lid): LayerStore(
                layer_id=int(lid),
                patches=tensors[f"layer_{lid}_patches"],
                image_index=tensors[f"layer_{lid}_image_index"],
                coords=tensors[f"layer_{lid}_coords"],
            )
            for lid in meta["layer_ids"]
        }
        bank = MemoryBank(
            globals=tensors["globals"],
            image_ids=list(meta["image_ids"]),
            categories=list(meta["categories"]),
            grid=grid,
            layer_stores=stores,
            position_index=tensors["position_index"],
        )
    except KeyError as exc:
        raise ValidationError(f"bank file missing field {exc}") from exc
    _validate_bank(bank)
    return bank


def _validate_bank(bank: MemoryBank) -> None:
    n = bank.num_images
    h, w = bank.grid
    if n < 1 or len(bank.image_ids) != n or len(bank.categories) != n:
        raise ValidationError("bank image metadata inconsistent with globals")
    if np.any(np.abs(np.linalg.norm(bank.globals.astype(np.float64), axis=1) - 1) > 1e-3):
        raise ValidationError("bank globals not unit-norm")
    expected = np.stack(
        [
            np.arange(h * w, dtype=np.int64) * n,
            (np.arange(h * w, dtype=np.int64) + 1) * n,
        ],
        axis=1,
    )
    if bank.position_index.shape != (h * w, 2) or np.any(
        bank.position_index != expected
    ):
        raise ValidationError("position_index does not partition the patch rows")
    for lid, store in bank.layer_stores.items():
        rows = n * h * w
        if store.patches.shape[0] != rows:
            raise ValidationError(f"layer {lid}: expected {rows} patch rows")
        if store.image_index.shape != (rows,) or store.coords.shape != (rows, 2):
            raise ValidationError(f"layer {lid}: provenance arrays malformed")
        if store.image_index.min() < 0 or store.image_index.max() >= n:
            raise ValidationError(f"layer {lid}: image_index out of range")
        norms = np.linalg.norm(store.patches.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ValidationError(f"layer {lid}: patch rows not unit-norm")
