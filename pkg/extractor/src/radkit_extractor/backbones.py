"""Frozen vision-transformer backbones behind one small adapter interface.

A backbone takes a preprocessed image batch (B, 3, H, W) and returns the
final-layer class token plus the patch-token grid of every tapped block,
both as float32 numpy arrays. The registry is pluggable; pretrained entries
load through torch.hub and need network access (or a hub cache) once, while
``tiny_vit_p16`` is a deterministic randomly initialized model intended for
tests and plumbing checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneError(RuntimeError):
    pass


@dataclass
class Backbone:
    """Adapter around one frozen encoder."""

    name: str
    patch_size: int
    depth: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    _forward: Callable[[torch.Tensor, Sequence[int]], tuple[torch.Tensor, dict]]

    def extract(
        self, batch: torch.Tensor, layer_ids: Sequence[int]
    ) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Run the frozen encoder.

        Returns (cls tokens (B, d_g), {layer id: patch grids (B, H, W, d)}).
        """
        bad = [l for l in layer_ids if not 1 <= l <= self.depth]
        if bad:
            raise BackboneError(
                f"layer ids {bad} invalid for {self.name!r} (depth {self.depth})"
            )
        with torch.inference_mode():
            cls, grids = self._forward(batch, layer_ids)
        return (
            cls.to(torch.float32).cpu().numpy(),
            {lid: g.to(torch.float32).cpu().numpy() for lid, g in grids.items()},
        )


class _TinyViT(nn.Module):
    """Minimal ViT used for deterministic, download-free extraction tests."""

    def __init__(self, patch_size=16, dim=32, depth=4, heads=4, max_side=64):
        super().__init__()
        self.patch_size = patch_size
        self.embed = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        max_tokens = (max_side // patch_size) ** 2 + 1
        self.pos = nn.Parameter(torch.zeros(1, max_tokens, dim))
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=dim,
                nhead=heads,
                dim_feedforward=dim * 2,
                batch_first=True,
                dropout=0.0,
            )
            for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dim)

    def forward_tapped(self, x: torch.Tensor, layer_ids: Sequence[int]):
        b = x.shape[0]
        grid_h = x.shape[2] // self.patch_size
        grid_w = x.shape[3] // self.patch_size
        tokens = self.embed(x).flatten(2).transpose(1, 2)  # (B, N, d)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        tokens = tokens + self.pos[:, : tokens.shape[1]]
        wanted = set(layer_ids)
        grids: dict[int, torch.Tensor] = {}
        for idx, block in enumerate(self.blocks, start=1):
            tokens = block(tokens)
            if idx in wanted:
                patches = self.norm(tokens[:, 1:])
                grids[idx] = patches.reshape(b, grid_h, grid_w, -1)
        cls = self.norm(tokens)[:, 0]
        return cls, grids


def _build_tiny(device: str) -> Backbone:
    torch.manual_seed(1234)  # fixed weights: extraction is reproducible
    model = _TinyViT().to(device).eval()
    for p in model.parameters():
        p.requires_grad_(False)

    def forward(batch, layer_ids):
        return model.forward_tapped(batch.to(device), layer_ids)

    return Backbone(
        name="tiny_vit_p16",
        patch_size=16,
        depth=4,
        mean=(0.5, 0.5, 0.5),
        std=(0.5, 0.5, 0.5),
        _forward=forward,
    )


def _build_dino_hub(repo: str, entry: str, patch_size: int, depth: int):
    def builder(device: str) -> Backbone:
        try:
            model = torch.hub.load(repo, entry)
        except Exception as exc:  # network / cache miss
            raise BackboneError(
                f"could not load {entry!r} from torch.hub ({exc}); "
                "pretrained weights need network access or a hub cache"
            ) from exc
        model = model.to(device).eval()
        for p in model.parameters():
            p.requires_grad_(False)

        def forward(batch, layer_ids):
            batch = batch.to(device)
            wanted = list(dict.fromkeys([*layer_ids, depth]))
            outs = model.get_intermediate_layers(
                # hub DINO models index blocks from 0
                batch, n=[l - 1 for l in wanted], return_class_token=True, norm=True
            )
            by_layer = dict(zip(wanted, outs))
            grids = {}
            for lid in layer_ids:
                tokens, _cls = by_layer[lid]
                grid = int(math.isqrt(tokens.shape[1]))
                grids[lid] = tokens.reshape(tokens.shape[0], grid, grid, -1)
            return by_layer[depth][1], grids

        return Backbone(
            name=entry,
            patch_size=patch_size,
            depth=depth,
            mean=IMAGENET_MEAN,
            std=IMAGENET_STD,
            _forward=forward,
        )

    return builder


_REGISTRY: dict[str, Callable[[str], Backbone]] = {
    "tiny_vit_p16": _build_tiny,
    "dinov3_vitb16": _build_dino_hub("facebookresearch/dinov3", "dinov3_vitb16", 16, 12),
    "dinov2_vitb14": _build_dino_hub("facebookresearch/dinov2", "dinov2_vitb14", 14, 12),
}

DEFAULT_BACKBONE = "dinov3_vitb16"


def available_backbones() -> list[str]:
    return sorted(_REGISTRY)


def load_backbone(name: str, device: str = "cpu") -> Backbone:
    if name not in _REGISTRY:
        raise BackboneError(
            f"unknown backbone {name!r}; available: {', '.join(available_backbones())}"
        )
    return _REGISTRY[name](device)
