"""Patch-transformer image encoder with DEiT-Small geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import LayerNorm, Linear, Module, ModuleList, TransformerBlock, block_parameter_count, trunc_normal
from .numcore import ContractError, ShapeError, Tensor, concat
from .numcore.tensor import DEFAULT_DTYPE


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 64
    patch_size: int = 16
    channels: int = 1
    width: int = 64
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


FULL_VISION = VisionConfig(image_size=224, patch_size=16, channels=3, width=384, depth=12, heads=6, mlp_ratio=4.0)
DESK_VISION = VisionConfig()


def count_parameters(cfg: VisionConfig) -> int:
    """Closed-form parameter count; nothing is allocated."""
    d = cfg.width
    patch_embed = cfg.patch_dim * d + d
    tokens = d + (cfg.num_patches + 1) * d
    final_norm = 2 * d
    return patch_embed + tokens + cfg.depth * block_parameter_count(d, cfg.mlp_ratio) + final_norm


def patchify(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (H, W, C) or (B, H, W, C) images into raster-ordered flattened patches.

    Within a patch, pixels are row-major with channels innermost.
    """
    img = np.asarray(img)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    if img.ndim != 4:
        raise ShapeError(f"expected (H, W, C) or (B, H, W, C), got shape {np.shape(img)}")
    b, h, w, c = img.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    out = img.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * c)
    return out if batched else out[0]


@dataclass
class ImageEncoding:
    cls_embedding: Tensor
    patch_embeddings: Tensor

    def pooled(self) -> Tensor:
        return self.patch_embeddings.mean(axis=-2)


class VisionEncoder(Module):
    def __init__(self, cfg: VisionConfig = DESK_VISION, rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.width
        self.patch_embed = Linear(cfg.patch_dim, d, rng, dtype=dtype)
        self.param("cls_token", trunc_normal(rng, (d,), dtype=dtype))
        self.param("pos_embed", trunc_normal(rng, (cfg.num_patches + 1, d), dtype=dtype))
        self.blocks = ModuleList(TransformerBlock(d, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.depth))
        self.norm = LayerNorm(d, dtype)

    def __call__(self, images) -> ImageEncoding:
        """Encode a batch of (B, H, W, C) images."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        cfg = self.cfg
        if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ShapeError(
                f"images of shape {images.shape[1:]} do not match config "
                f"{(cfg.image_size, cfg.image_size, cfg.channels)}"
            )
        b = images.shape[0]
        patches = Tensor(patchify(images, cfg.patch_size).astype(self.pos_embed.dtype))
        x = self.patch_embed(patches)
        cls = self.cls_token.reshape(1, 1, cfg.width) + Tensor(np.zeros((b, 1, 1), dtype=x.dtype))
        x = concat([cls, x], axis=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return ImageEncoding(cls_embedding=x[:, 0], patch_embeddings=x[:, 1:])

    def attention_maps(self) -> list[np.ndarray]:
        return [blk.attn.last_weights for blk in self.blocks]

    def set_trainable(self, depth_threshold: int) -> None:
        """Freeze blocks below ``depth_threshold``; blocks at or above it stay trainable.

        The CLS token, positional table and final norm are always trainable;
        the patch projection only when every block is.
        """
        if not 0 <= depth_threshold <= self.cfg.depth:
            raise ContractError(f"depth_threshold {depth_threshold} outside [0, {self.cfg.depth}]")
        for i, block in enumerate(self.blocks):
            block.set_requires_grad(i >= depth_threshold)
        self.patch_embed.set_requires_grad(depth_threshold == 0)
        self.cls_token.requires_grad = True
        self.pos_embed.requires_grad = True
        self.norm.set_requires_grad(True)

