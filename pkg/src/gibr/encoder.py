"""Setwise multi-view U-Net encoder.

Maps V (possibly noisy) views plus per-view conditioning (diffusion
timestep, relative camera pose, optional class tag) to pixel-aligned
feature planes and low-resolution equirectangular planes.  Views are
processed independently by the convolutional path and exchange information
through linear-attention layers whose tokens span all positions in all
views, so the network is equivariant to view order and supports a variable
number of views with a single parameter set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import CameraPose, pose_flatten


@dataclass
class EncoderConfig:
    """Architecture of the multi-view U-Net (desk-scale defaults)."""

    base_width: int = 32
    channel_mults: tuple = (1, 2, 4)
    attn_levels: tuple = (1, 2)  # level indices with attention (coarsest = last)
    heads: int = 4
    temb_dim: int = 32
    pose_dim: int = 16  # per-half width of the pose embedding
    feature_channels: int = 16  # pinhole plane channels C
    polar_channels: int = 8  # polar plane channels C'
    num_classes: int = 0  # 0 disables the class embedding
    cross_view: bool = True  # False: attention stays within each view
    use_polar: bool = True
    no3d: bool = False  # last layer emits RGB directly (2D-diffusion mode)

    def __post_init__(self):
        if len(self.channel_mults) < 2:
            raise ValueError("need at least two resolution levels")

    @property
    def cond_dim(self) -> int:
        return self.temb_dim + 2 * self.pose_dim

    @property
    def levels(self) -> int:
        return len(self.channel_mults)


def fourier_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos features of a scalar at geometrically spaced frequencies."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(t.dtype)
    angles = t.reshape(-1, 1) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TimestepEmbed(nn.Module):
    """Fourier embedding of the diffusion timestep followed by a 2-layer head."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = t.to(self.net[0].weight.dtype)
        return self.net(fourier_features(t, self.dim))


class PoseEmbed(nn.Module):
    """Per-view camera embedding: own pose MLP output concatenated with the
    elementwise max of the other views' outputs (zeros when V = 1)."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(25, 32), nn.SiLU(), nn.Linear(32, dim))

    def forward(self, poses: list[CameraPose]) -> torch.Tensor:
        dtype = self.net[0].weight.dtype
        flat = torch.as_tensor(np.stack([pose_flatten(p) for p in poses]), dtype=dtype)
        own = self.net(flat)  # (V, dim)
        V = own.shape[0]
        if V == 1:
            pooled = torch.zeros_like(own)
        else:
            expanded = own.unsqueeze(0).expand(V, V, self.dim).clone()
            diag = torch.eye(V, dtype=torch.bool)
            expanded[diag] = float("-inf")
            pooled = expanded.max(dim=1).values
        return torch.cat([own, pooled], dim=-1)  # (V, 2*dim)


class ResBlock(nn.Module):
    """Residual conv block; the conditioning vector is broadcast spatially
    and concatenated with the (normalized) features before the first conv."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch + cond_dim, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        V, _, h, w = x.shape
        cmap = cond[:, :, None, None].expand(V, cond.shape[1], h, w)
        out = self.conv1(torch.cat([torch.nn.functional.silu(self.norm1(x)), cmap], dim=1))
        out = self.conv2(torch.nn.functional.silu(self.norm2(out)))
        return out + self.skip(x)


class LinearAttention(nn.Module):
    """Multi-head linear attention (kernel elu(x)+1) over all positions.

    With `cross_view` the token set spans every location in every view of
    the scene; otherwise each view attends only within itself.
    """

    def __init__(self, dim: int, heads: int, cross_view: bool = True):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.cross_view = cross_view
        self.norm = nn.GroupNorm(min(8, dim), dim)
        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.proj = nn.Conv2d(dim, dim, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        V, C, h, w = x.shape
        qkv = self.qkv(self.norm(x))  # (V, 3C, h, w)
        qkv = qkv.reshape(V, 3, self.heads, C // self.heads, h * w)
        if self.cross_view:
            # fold the view axis into the token axis: one token set per scene
            qkv = qkv.permute(1, 2, 3, 0, 4).reshape(3, 1, self.heads, C // self.heads, V * h * w)
        else:
            qkv = qkv.permute(1, 0, 2, 3, 4)  # (3, V, heads, hd, h*w)
        q, k, v = qkv[0], qkv[1], qkv[2]
        q = torch.nn.functional.elu(q) + 1.0
        k = torch.nn.functional.elu(k) + 1.0
        kv = torch.einsum("bhdn,bhen->bhde", k, v)
        num = torch.einsum("bhdn,bhde->bhen", q, kv)
        den = torch.einsum("bhdn,bhd->bhn", q, k.sum(dim=-1)).unsqueeze(-2) + 1e-6
        out = num / den  # (b, heads, hd, tokens)
        if self.cross_view:
            out = out.reshape(self.heads, C // self.heads, V, h * w).permute(2, 0, 1, 3)
        out = out.reshape(V, C, h, w)
        return x + self.proj(out)


class MultiViewUNet(nn.Module):
    """U-Net over one scene's V views; 8 ResNet blocks, conditioned at every
    block, with attention at the two coarsest levels."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chs = [cfg.base_width * m for m in cfg.channel_mults]
        cond = cfg.cond_dim
        L = len(chs)

        self.temb = TimestepEmbed(cfg.temb_dim)
        self.pose_embed = PoseEmbed(cfg.pose_dim)
        self.class_embed = nn.Embedding(cfg.num_classes, cfg.temb_dim) if cfg.num_classes else None

        self.stem = nn.Conv2d(3, chs[0], 3, padding=1)
        self.down_blocks = nn.ModuleList([ResBlock(chs[i], chs[i], cond) for i in range(L)])
        self.down_attn = nn.ModuleList(
            [
                LinearAttention(chs[i], cfg.heads, cfg.cross_view)
                if i in cfg.attn_levels
                else nn.Identity()
                for i in range(L)
            ]
        )
        self.downsamples = nn.ModuleList(
            [nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1) for i in range(L - 1)]
        )
        self.mid1 = ResBlock(chs[-1], chs[-1], cond)
        self.mid_attn = LinearAttention(chs[-1], cfg.heads, cfg.cross_view)
        self.mid2 = ResBlock(chs[-1], chs[-1], cond)
        self.up_blocks = nn.ModuleList([ResBlock(chs[i] * 2, chs[i], cond) for i in range(L)])
        self.up_attn = nn.ModuleList(
            [
                LinearAttention(chs[i], cfg.heads, cfg.cross_view)
                if i in cfg.attn_levels
                else nn.Identity()
                for i in range(L)
            ]
        )
        self.upsamples = nn.ModuleList(
            [nn.Conv2d(chs[i + 1], chs[i], 3, padding=1) for i in range(L - 1)]
        )

        out_ch = 3 if cfg.no3d else cfg.feature_channels
        self.out_norm = nn.GroupNorm(8, chs[0])
        self.out_conv = nn.Conv2d(chs[0], out_ch, 3, padding=1)
        if cfg.use_polar and not cfg.no3d:
            self.polar_norm = nn.GroupNorm(8, chs[-1])
            self.polar_conv = nn.Conv2d(chs[-1], cfg.polar_channels, 3, padding=1)

    def conditioning(self, timesteps, poses, class_tag=None) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(timesteps, dtype=np.float64))
        temb = self.temb(t)  # (V, temb_dim)
        if self.class_embed is not None and class_tag is not None:
            temb = temb + self.class_embed(torch.tensor(int(class_tag)))
        return torch.cat([temb, self.pose_embed(poses)], dim=-1)  # (V, cond_dim)

    def forward(self, images: torch.Tensor, cond: torch.Tensor):
        """Encode one scene.

        Args:
            images: (V, 3, H, W) views in [-1, 1]; H and W must be divisible
                by 2**(levels - 1).
            cond: (V, cond_dim) per-view conditioning vectors.

        Returns:
            (planes, polar) with planes (V, C, H, W) and polar
            (V, C', H//2, H); in no3d mode, (rgb, None) with rgb (V, 3, H, W).
        """
        V, _, H, W = images.shape
        if V < 1:
            raise ValueError("encoder needs at least one view")
        scale = 2 ** (len(self.cfg.channel_mults) - 1)
        if H % scale or W % scale:
            raise ValueError(f"image size {W}x{H} not divisible by {scale}")

        h = self.stem(images)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, cond)
            h = self.down_attn[i](h)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        h = self.mid1(h, cond)
        h = self.mid_attn(h)
        h = self.mid2(h, cond)
        coarsest = h
        for i in reversed(range(len(self.up_blocks))):
            h = self.up_blocks[i](torch.cat([h, skips[i]], dim=1), cond)
            h = self.up_attn[i](h)
            if i > 0:
                h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i - 1](h)
        out = self.out_conv(torch.nn.functional.silu(self.out_norm(h)))

        if self.cfg.no3d or not self.cfg.use_polar:
            return out, None
        polar = self.polar_conv(torch.nn.functional.silu(self.polar_norm(coarsest)))
        polar = torch.nn.functional.interpolate(
            polar, size=(H // 2, H), mode="bilinear", align_corners=False
        )
        return out, polar
