"""Vision-transformer backbones that emit per-patch feature grids.

Two families are registered:

* ``dinov2-*``: pretrained DINOv2 models fetched through torch.hub.  These
  need network access (or a populated hub cache) and fail fatally otherwise.
* ``seeded-*``: the same architectures with deterministic random weights,
  for running the export pipeline offline.  Features are not semantically
  meaningful but are reproducible byte-for-byte.

Every backbone exposes ``patch_size``, ``dim``, and ``encode(image) ->
(H, W, D) float32`` where ``image`` is an RGB array in [0, 1] whose sides
are multiples of ``patch_size``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from protohead.errors import ProtoheadError


class BackboneLoadError(ProtoheadError):
    """The requested backbone could not be constructed or fetched."""


# mean/std applied before encoding; documented here, recorded nowhere else
IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

_VIT_SHAPES = {
    # name suffix -> (dim, depth, heads)
    "t": (192, 12, 3),
    "s": (384, 12, 6),
    "b": (768, 12, 12),
    "l": (1024, 24, 16),
}


def _sincos_position_grid(rows: int, cols: int, dim: int) -> torch.Tensor:
    """2-D sinusoidal position embedding, (rows*cols, dim); size-agnostic."""
    if dim % 4 != 0:
        raise BackboneLoadError(f"embedding dim {dim} must be divisible by 4")
    quarter = dim // 4
    freqs = torch.exp(-math.log(10000.0) * torch.arange(quarter) / quarter)
    ys = torch.arange(rows, dtype=torch.float32)[:, None] * freqs[None, :]
    xs = torch.arange(cols, dtype=torch.float32)[:, None] * freqs[None, :]
    y_emb = torch.cat([ys.sin(), ys.cos()], dim=1)  # (rows, dim/2)
    x_emb = torch.cat([xs.sin(), xs.cos()], dim=1)  # (cols, dim/2)
    grid = torch.cat(
        [
            y_emb[:, None, :].expand(rows, cols, dim // 2),
            x_emb[None, :, :].expand(rows, cols, dim // 2),
        ],
        dim=2,
    )
    return grid.reshape(rows * cols, dim)


class _MiniViT(nn.Module):
    """Plain pre-norm ViT encoder over patch tokens, no class token."""

    def __init__(self, dim: int, depth: int, heads: int, patch: int):
        super().__init__()
        self.patch = patch
        self.dim = dim
        self.embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        layer = nn.TransformerEncoderLayer(
            d_model=dim,
            nhead=heads,
            dim_feedforward=4 * dim,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=depth,
                                             enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.embed(x)  # (1, D, rows, cols)
        rows, cols = tokens.shape[2], tokens.shape[3]
        tokens = tokens.flatten(2).transpose(1, 2)  # (1, rows*cols, D)
        tokens = tokens + _sincos_position_grid(rows, cols, self.dim).to(tokens.dtype)
        tokens = self.norm(self.encoder(tokens))
        return tokens.reshape(rows, cols, self.dim)


@dataclass
class PatchBackbone:
    """Wrapper giving a uniform numpy-in / numpy-out encode interface."""

    name: str
    patch_size: int
    dim: int
    _module: nn.Module
    _to_grid: callable

    @torch.no_grad()
    def encode(self, image: np.ndarray) -> np.ndarray:
        if image.ndim != 3 or image.shape[2] != 3:
            raise BackboneLoadError(f"expected an RGB array, got shape {image.shape}")
        h, w = image.shape[:2]
        if h % self.patch_size or w % self.patch_size or h == 0 or w == 0:
            raise BackboneLoadError(
                f"image sides {w}x{h} must be positive multiples of {self.patch_size}"
            )
        arr = (image.astype(np.float32) - IMAGE_MEAN) / IMAGE_STD
        tensor = torch.from_numpy(arr).permute(2, 0, 1)[None]
        out = self._to_grid(self._module, tensor)
        return np.ascontiguousarray(out.float().cpu().numpy(), dtype=np.float32)


def _build_seeded(size: str, patch: int, seed: int) -> PatchBackbone:
    dim, depth, heads = _VIT_SHAPES[size]
    torch.manual_seed(seed)
    module = _MiniViT(dim, depth, heads, patch).eval()

    def to_grid(m, tensor):
        return m(tensor)

    return PatchBackbone(f"seeded-vit-{size}-{patch}", patch, dim, module, to_grid)


def _build_dinov2(size: str, patch: int) -> PatchBackbone:
    dim = _VIT_SHAPES[size][0]
    hub_name = f"dinov2_vit{size}{patch}"
    try:
        module = torch.hub.load("facebookresearch/dinov2", hub_name).eval()
    except Exception as exc:  # fatal per contract: no backbone, no export
        raise BackboneLoadError(
            f"could not fetch pretrained backbone {hub_name!r} via torch.hub "
            f"(network or cache required): {exc}"
        ) from exc

    def to_grid(m, tensor):
        rows = tensor.shape[2] // patch
        cols = tensor.shape[3] // patch
        tokens = m.get_intermediate_layers(tensor, n=1)[0][0]  # (rows*cols, D)
        return tokens.reshape(rows, cols, -1)

    return PatchBackbone(f"dinov2-vit{size}-{patch}", patch, dim, module, to_grid)


def available_backbones() -> list[str]:
    names = []
    for size in _VIT_SHAPES:
        names.append(f"seeded-vit-{size}-14")
        names.append(f"dinov2-vit{size}-14")
    return names


def load_backbone(name: str, seed: int = 0) -> PatchBackbone:
    """Construct a backbone by registry name; raises BackboneLoadError."""
    parts = name.split("-")
    if len(parts) == 4 and parts[0] == "seeded" and parts[1] == "vit":
        size, patch = parts[2], parts[3]
        if size in _VIT_SHAPES and patch.isdigit():
            return _build_seeded(size, int(patch), seed)
    if len(parts) == 3 and parts[0] == "dinov2" and parts[1].startswith("vit"):
        size, patch = parts[1][3:], parts[2]
        if size in _VIT_SHAPES and patch.isdigit():
            return _build_dinov2(size, int(patch))
    raise BackboneLoadError(
        f"unknown backbone {name!r}; available: {', '.join(available_backbones())}"
    )
