"""Multi-level retrieval scoring.

Scoring a test image proceeds in two stages. A global stage ranks the bank's
images by cosine similarity of global descriptors and keeps the top K. A
patch stage then scores every grid cell of every configured layer as one
minus the best cosine similarity to candidate patches, where candidates are
restricted to the retrieved images and to bank positions within an
l-infinity ball of radius rho around the query cell (clipped at the grid
border, no wraparound). Per-layer grids are combined by a weighted fusion
with nonnegative weights summing to one.

Two implementations share this contract: ``score_image`` walks the bank's
position-major layout in contiguous blocks, while ``score_image_bruteforce``
re-derives every candidate set by testing the spatial and membership
predicates against all stored rows. Both accumulate dot products in float64
through fixed-order summation (``np.einsum``), so results are independent of
blocking and of the degree of parallelism; similarity ties are broken toward
the lowest bank row id in both paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anomaly_map import AnomalyResult, image_score, upsample_map
from .errors import ValidationError
from .feature_io import FeaturePack, l2_normalize_rows
from .memory_bank import MemoryBank

WEIGHT_TOL = 1e-6


@dataclass
class RetrievalConfig:
    """All scoring knobs: layer set and weights, K, rho, pooling, output size."""

    layers: tuple[int, ...] = (4, 7, 10, 12)
    weights: tuple[float, ...] | None = None
    topk: int = 150
    rho: int = 1
    pooling_fraction: float = 0.01
    output_resolution: tuple[int, int] = (448, 448)
    smoothing_sigma: float = 0.0

    def resolved_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self.layers), 1.0 / len(self.layers))
        return np.asarray(self.weights, dtype=np.float64)

    def validate(self) -> None:
        if not self.layers:
            raise ValidationError("config.layers must be non-empty")
        if len(set(self.layers)) != len(self.layers):
            raise ValidationError("config.layers must be unique")
        w = self.resolved_weights()
        if w.shape != (len(self.layers),):
            raise ValidationError("config.weights length must match layers")
        if np.any(w < 0):
            raise ValidationError("config.weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > WEIGHT_TOL:
            raise ValidationError(
                f"config.weights sum {float(w.sum()):.8f} != 1 within {WEIGHT_TOL}"
            )
        if self.topk < 1:
            raise ValidationError(f"config.topk {self.topk} must be >= 1")
        if self.rho < 0:
            raise ValidationError(f"config.rho {self.rho} must be >= 0")
        if not 0.0 < self.pooling_fraction <= 1.0:
            raise ValidationError("config.pooling_fraction outside (0, 1]")
        if self.output_resolution[0] < 1 or self.output_resolution[1] < 1:
            raise ValidationError("config.output_resolution must be positive")
        if self.smoothing_sigma < 0:
            raise ValidationError("config.smoothing_sigma must be >= 0")


@dataclass
class CandidateSet:
    """Bank rows eligible to match one query cell at one layer."""

    layer_id: int
    position: tuple[int, int]
    row_ids: np.ndarray  # ascending row indices into the layer store


def _dots(block: np.ndarray, query: np.ndarray) -> np.ndarray:
    # einsum keeps a fixed summation order per row, so a row's similarity is
    # bit-identical no matter which block it is evaluated in.
    return np.einsum("nd,d->n", block, query)


def global_topk(bank: MemoryBank, g: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k most similar bank images, best first.

    Ties are broken toward the lower image index; enlarging k only ever
    appends to the selection.
    """
    if k < 1:
        raise ValidationError(f"topk {k} must be >= 1")
    if bank.num_images == 0:
        raise ValidationError("bank is empty")
    g64 = l2_normalize_rows(np.asarray(g, dtype=np.float32)).astype(np.float64)
    sims = _dots(bank.globals.astype(np.float64), g64)
    order = np.argsort(-sims, kind="stable")
    return order[: min(k, bank.num_images)].astype(np.int64)


def candidate_set(
    bank: MemoryBank,
    layer_id: int,
    position: tuple[int, int],
    rho: int,
    topk_images: np.ndarray,
) -> CandidateSet:
    """Rows within the clipped rho-neighborhood of ``position`` whose source
    image is among ``topk_images``."""
    h, w = bank.grid
    ht, wt = int(position[0]), int(position[1])
    if not (0 <= ht < h and 0 <= wt < w):
        raise ValidationError(f"position {position} outside grid {bank.grid}")
    if layer_id not in bank.layer_stores:
        raise ValidationError(f"bank has no layer {layer_id}")
    n = bank.num_images
    topk_asc = np.sort(np.asarray(topk_images, dtype=np.int64))
    rows = []
    for hh in range(max(0, ht - rho), min(h, ht + rho + 1)):
        for ww in range(max(0, wt - rho), min(w, wt + rho + 1)):
            base = (hh * w + ww) * n
            rows.append(base + topk_asc)
    return CandidateSet(
        layer_id=layer_id,
        position=(ht, wt),
        row_ids=np.concatenate(rows) if rows else np.empty(0, dtype=np.int64),
    )


def patch_score(
    query: np.ndarray,
    candidates: np.ndarray,
    row_ids: np.ndarray | None = None,
) -> tuple[float, int]:
    """1-NN cosine dissimilarity of ``query`` against candidate rows.

    Returns (score, argmax row id); score = 1 - max cosine, clamped to
    [0, 2] against float round-off. Ties pick the lowest row id.
    """
    cand = np.asarray(candidates, dtype=np.float64)
    if cand.ndim != 2 or cand.shape[0] == 0:
        raise ValidationError("empty candidate set")
    q = np.asarray(query, dtype=np.float64)
    sims = _dots(cand, q)
    best = int(np.argmax(sims))
    score = min(max(1.0 - float(sims[best]), 0.0), 2.0)
    if row_ids is None:
        return score, best
    return score, int(np.asarray(row_ids)[best])


def distance_to_set(query: np.ndarray, memory: np.ndarray) -> tuple[float, int]:
    """Minimum Euclidean distance from ``query`` to the rows of ``memory``.

    Exact for stored points (a row equal to the query gives 0.0). For unit
    vectors, distance**2 == 2 * (1 - cosine similarity).
    """
    mem = np.asarray(memory, dtype=np.float64)
    if mem.ndim != 2 or mem.shape[0] == 0:
        raise ValidationError("memory set is empty")
    diff = mem - np.asarray(query, dtype=np.float64)
    dists = np.sqrt(np.einsum("nd,nd->n", diff, diff))
    best = int(np.argmin(dists))
    return float(dists[best]), best


def _check_compat(bank: MemoryBank, pack: FeaturePack, config: RetrievalConfig) -> None:
    config.validate()
    missing_bank = set(config.layers) - set(bank.layer_ids)
    if missing_bank:
        raise ValidationError(f"bank missing layers {sorted(missing_bank)}")
    missing_pack = set(config.layers) - set(pack.layer_ids)
    if missing_pack:
        raise ValidationError(
            f"pack {pack.image_id!r} missing layers {sorted(missing_pack)}"
        )
    if pack.grid_shape != bank.grid:
        raise ValidationError(
            f"pack grid {pack.grid_shape} != bank grid {bank.grid}"
        )


def _finalize(
    layer_grids: dict[int, np.ndarray],
    nn_ids: dict[int, np.ndarray],
    weights: np.ndarray,
    layers: tuple[int, ...],
    topk_images: np.ndarray,
    config: RetrievalConfig,
) -> AnomalyResult:
    fused = np.zeros_like(next(iter(layer_grids.values())))
    for wl, lid in zip(weights, layers):
        fused = fused + wl * layer_grids[lid]
    pixel_map = upsample_map(fused, config.output_resolution)
    if config.smoothing_sigma > 0:
        from scipy.ndimage import gaussian_filter

        pixel_map = gaussian_filter(pixel_map, sigma=config.smoothing_sigma)
    return AnomalyResult(
        layer_grids=layer_grids,
        fused_grid=fused,
        pixel_map=pixel_map,
        image_score=image_score(pixel_map, config.pooling_fraction),
        topk_images=topk_images,
        nn_ids=nn_ids,
    )


def score_image(
    bank: MemoryBank, pack: FeaturePack, config: RetrievalConfig
) -> AnomalyResult:
    """Score one test image against the bank (blocked position-major path)."""
    _check_compat(bank, pack, config)
    h, w = bank.grid
    n = bank.num_images
    topk = global_topk(bank, pack.global_descriptor, config.topk)
    topk_asc = np.sort(topk)
    rho = config.rho

    layer_grids: dict[int, np.ndarray] = {}
    nn_ids: dict[int, np.ndarray] = {}
    for lid in config.layers:
        store = bank.layer_stores[lid]
        queries = l2_normalize_rows(
            pack.layer(lid).data.reshape(h * w, store.dim)
        ).astype(np.float64)
        best = np.full(h * w, -np.inf)
        best_id = np.zeros(h * w, dtype=np.int64)
        # Each bank position p contributes its candidate block to exactly the
        # query cells within rho of p; blocks are visited in ascending row
        # order so strict improvement keeps the lowest row id on ties.
        for p in range(h * w):
            ph, pw = divmod(p, w)
            rows = p * n + topk_asc
            block = store.patches[rows].astype(np.float64)
            targets = [
                th * w + tw
                for th in range(max(0, ph - rho), min(h, ph + rho + 1))
                for tw in range(max(0, pw - rho), min(w, pw + rho + 1))
            ]
            sims = np.einsum("nd,td->tn", block, queries[targets])
            block_best = sims.max(axis=1)
            block_arg = sims.argmax(axis=1)
            for j, t in enumerate(targets):
                if block_best[j] > best[t]:
                    best[t] = block_best[j]
                    best_id[t] = rows[block_arg[j]]
        scores = np.clip(1.0 - best, 0.0, 2.0)
        layer_grids[lid] = scores.reshape(h, w)
        nn_ids[lid] = best_id.reshape(h, w)

    return _finalize(
        layer_grids, nn_ids, config.resolved_weights(), config.layers, topk, config
    )


def score_image_bruteforce(
    bank: MemoryBank, pack: FeaturePack, config: RetrievalConfig
) -> AnomalyResult:
    """Reference implementation: same contract as :func:`score_image`, with
    every candidate set re-derived by predicate over all stored rows."""
    _check_compat(bank, pack, config)
    h, w = bank.grid
    topk = global_topk(bank, pack.global_descriptor, config.topk)
    member = np.zeros(bank.num_images, dtype=bool)
    member[topk] = True
    rho = config.rho

    layer_grids: dict[int, np.ndarray] = {}
    nn_ids: dict[int, np.ndarray] = {}
    for lid in config.layers:
        store = bank.layer_stores[lid]
        queries = l2_normalize_rows(
            pack.layer(lid).data.reshape(h * w, store.dim)
        ).astype(np.float64)
        h_n = store.coords[:, 0].astype(np.int64)
        w_n = store.coords[:, 1].astype(np.int64)
        in_topk = member[store.image_index]
        scores = np.empty((h, w))
        ids = np.empty((h, w), dtype=np.int64)
        for ht in range(h):
            for wt in range(w):
                keep = (
                    (np.abs(h_n - ht) <= rho)
                    & (np.abs(w_n - wt) <= rho)
                    & in_topk
                )
                rows = np.nonzero(keep)[0]
                if rows.size == 0:
                    raise ValidationError("empty candidate set")
                q = queries[ht * w + wt]
                best_val = -np.inf
                best_row = -1
                for r in rows:
                    val = float(np.einsum("d,d->", store.patches[r].astype(np.float64), q))
                    if val > best_val:
                        best_val = val
                        best_row = int(r)
                scores[ht, wt] = min(max(1.0 - best_val, 0.0), 2.0)
                ids[ht, wt] = best_row
        layer_grids[lid] = scores
        nn_ids[lid] = ids

    return _finalize(
        layer_grids, nn_ids, config.resolved_weights(), config.layers, topk, config
    )
