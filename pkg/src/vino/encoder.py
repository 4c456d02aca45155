"""A small vision transformer with a self-distillation projection head.

The forward pass exposes everything the rest of the package needs: the
class-token embedding, projected logits, patch tokens, the keys of the last
attention layer and the class-token attention over patches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 3
    num_heads: int = 4
    head_output_dim: int = 256
    mlp_ratio: float = 2.0
    head_hidden_dim: int = 128
    head_bottleneck_dim: int = 256
    image_size: int = 64
    pos_embed: bool = True
    # wider than the usual 0.02 so class-token attention is input-dependent at init
    qkv_init_std: float = 0.1

    def validate(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")


class EncoderOutput(NamedTuple):
    cls_embedding: torch.Tensor  # (B, D)
    logits: torch.Tensor  # (B, U)
    patch_tokens: torch.Tensor  # (B, N, D)
    last_keys: torch.Tensor  # (B, heads, N, head_dim)
    cls_attention: torch.Tensor  # (B, heads, N)
    grid: tuple[int, int]


def patchify(image, patch_size: int):
    """Split ``H x W x C`` into row-major patches flattened as ``(py, px, c)``.

    Works on numpy arrays and on torch tensors shaped ``(B, C, H, W)``.
    """
    if isinstance(image, torch.Tensor):
        B, C, H, W = image.shape
        if H % patch_size or W % patch_size:
            raise ValueError(f"image size {H}x{W} not divisible by patch size {patch_size}")
        gh, gw = H // patch_size, W // patch_size
        x = image.reshape(B, C, gh, patch_size, gw, patch_size)
        return x.permute(0, 2, 4, 3, 5, 1).reshape(B, gh * gw, patch_size * patch_size * C)
    image = np.asarray(image)
    H, W, C = image.shape
    if H % patch_size or W % patch_size:
        raise ValueError(f"image size {H}x{W} not divisible by patch size {patch_size}")
    gh, gw = H // patch_size, W // patch_size
    x = image.reshape(gh, patch_size, gw, patch_size, C)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_size * patch_size * C)


def unpatchify(patches, patch_size: int, grid: tuple[int, int]):
    gh, gw = grid
    C = patches.shape[-1] // (patch_size * patch_size)
    x = np.asarray(patches).reshape(gh, gw, patch_size, patch_size, C)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh * patch_size, gw * patch_size, C)


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out), attn, k


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y, attn, k = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn, k


class ProjectionHead(nn.Module):
    """3-layer MLP, L2-normalised bottleneck, weight-normalised prototypes."""

    def __init__(self, in_dim, out_dim, hidden_dim, bottleneck_dim):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.prototypes = nn.Parameter(torch.empty(out_dim, bottleneck_dim))
        nn.init.normal_(self.prototypes, std=1.0)

    def forward(self, x):
        x = F.normalize(self.mlp(x), dim=-1)
        # unit-norm prototypes; norm is not learned
        return x @ F.normalize(self.prototypes, dim=-1).t()


class VisionTransformer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D = cfg.embed_dim
        p = cfg.patch_size
        self.patch_embed = nn.Linear(3 * p * p, D)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D))
        g = cfg.image_size // p
        self.base_grid = (g, g)
        if cfg.pos_embed:
            self.pos_embed = nn.Parameter(torch.zeros(1, g * g + 1, D))
        else:
            self.register_parameter("pos_embed", None)
        self.blocks = nn.ModuleList(Block(D, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(D)
        self.head = ProjectionHead(D, cfg.head_output_dim, cfg.head_hidden_dim, cfg.head_bottleneck_dim)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        if self.pos_embed is not None:
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        for blk in self.blocks:
            nn.init.normal_(blk.attn.qkv.weight, std=self.cfg.qkv_init_std)

    def _pos_embed(self, grid):
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        if tuple(grid) == self.base_grid:
            return torch.cat([cls_pos, patch_pos], dim=1)
        g0, g1 = self.base_grid
        D = patch_pos.shape[-1]
        patch_pos = patch_pos.reshape(1, g0, g1, D).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=tuple(grid), mode="bicubic", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid[0] * grid[1], D)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def forward(self, images: torch.Tensor) -> EncoderOutput:
        """``images`` is ``(B, 3, H, W)`` with H, W divisible by the patch size."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        p = self.cfg.patch_size
        H, W = images.shape[-2:]
        if H % p or W % p:
            raise ValueError(f"input {H}x{W} not divisible by patch size {p}")
        grid = (H // p, W // p)
        x = self.patch_embed(patchify(images, p))
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        if self.pos_embed is not None:
            x = x + self._pos_embed(grid)
        attn = keys = None
        for blk in self.blocks:
            x, attn, keys = blk(x)
        x = self.norm(x)
        cls = x[:, 0]
        cls_attn = attn[:, :, 0, 1:]
        cls_attn = cls_attn / cls_attn.sum(dim=-1, keepdim=True)
        return EncoderOutput(
            cls_embedding=cls,
            logits=self.head(cls),
            patch_tokens=x[:, 1:],
            last_keys=keys[:, :, 1:],
            cls_attention=cls_attn,
            grid=grid,
        )


def forward(params: nn.Module, image) -> EncoderOutput:
    """Functional alias: run ``params`` on a single ``H x W x 3`` image or a batch."""
    if isinstance(image, np.ndarray):
        image = torch.as_tensor(image).permute(2, 0, 1)[None]
        image = image.to(next(params.parameters()).dtype)
    return params(image)


def attention_map(output: EncoderOutput, index: int = 0) -> np.ndarray:
    """Head-averaged class-token attention on the patch grid; sums to 1."""
    attn = output.cls_attention[index].detach().to(torch.float64).mean(dim=0)
    return attn.reshape(output.grid).cpu().numpy()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
