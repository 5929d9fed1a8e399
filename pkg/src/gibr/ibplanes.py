"""Image-based feature-plane scene representation.

A scene is a set of per-view feature planes: a pinhole-aligned plane sampled
by projecting a 3D point into the view, and an equirectangular ("polar")
plane sampled by the direction of the point relative to the camera center,
which keeps geometry defined outside the view frustum.  Per-view features
are concatenated with a distance embedding, mapped through a shared MLP,
max-pooled over views, and decoded to density + color.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .diffcore import bilinear_interpolate, max_reduce
from .geometry import EPS_Z, CameraPose


@dataclass
class IBPlanesScene:
    """Per-view feature planes plus camera poses; the latent 3D scene."""

    planes: torch.Tensor  # (V, C, H_f, W_f) pinhole-aligned features
    polar_planes: torch.Tensor | None  # (V, C', H_p, W_p) equirectangular
    poses: list[CameraPose]
    dropped: tuple[int, ...] = ()  # views excluded from all point queries

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] < 1:
            raise ValueError(f"expected (V, C, H, W) planes, got {tuple(self.planes.shape)}")
        if len(self.poses) != self.planes.shape[0]:
            raise ValueError(
                f"{self.planes.shape[0]} planes but {len(self.poses)} poses"
            )
        if self.polar_planes is not None and self.polar_planes.shape[0] != self.planes.shape[0]:
            raise ValueError("polar plane count does not match pinhole plane count")

    @property
    def num_views(self) -> int:
        return int(self.planes.shape[0])

    def pose_tensors(self, dtype) -> dict:
        """Stacked pose matrices as torch tensors for batched point queries."""
        R = torch.as_tensor(
            np.stack([p.rotation for p in self.poses]), dtype=dtype
        )  # (V, 3, 3)
        t = torch.as_tensor(np.stack([p.translation for p in self.poses]), dtype=dtype)
        k = torch.as_tensor(
            np.stack(
                [
                    [p.intrinsics[0, 0], p.intrinsics[1, 1], p.intrinsics[0, 2], p.intrinsics[1, 2]]
                    for p in self.poses
                ]
            ),
            dtype=dtype,
        )  # (V, 4): fx fy cx cy
        centers = torch.as_tensor(np.stack([p.center for p in self.poses]), dtype=dtype)
        return {"R": R, "t": t, "k": k, "centers": centers}


class PointDecoder(nn.Module):
    """Shared per-view feature head + fusion decoder.

    `head` maps concat(pinhole feature, polar feature, distance embedding)
    to the per-view point feature; `fuse` maps the max-pooled feature to
    (density logit, rgb logits).  Density uses softplus, color sigmoid.
    """

    def __init__(
        self,
        pinhole_channels: int = 16,
        polar_channels: int = 8,
        hidden: int = 64,
        dist_frequencies: int = 4,
        use_polar: bool = True,
    ):
        super().__init__()
        self.pinhole_channels = pinhole_channels
        self.polar_channels = polar_channels if use_polar else 0
        self.use_polar = use_polar
        self.dist_frequencies = dist_frequencies
        in_dim = pinhole_channels + self.polar_channels + 2 * dist_frequencies
        self.head = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU()
        )
        self.fuse = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 4))

    def dist_embed(self, dist: torch.Tensor) -> torch.Tensor:
        """Fourier features of log(1 + distance); handles unbounded scenes."""
        s = torch.log1p(dist).unsqueeze(-1)
        freqs = 2.0 ** torch.arange(self.dist_frequencies, dtype=dist.dtype)
        angles = s * freqs
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _pinhole_plane_coords(scene: IBPlanesScene, pc: torch.Tensor, k: torch.Tensor):
    """Camera-frame points -> feature-plane texel coordinates + validity."""
    z = pc[..., 2]
    valid = z > EPS_Z
    zsafe = torch.where(valid, z, torch.ones_like(z))
    u = k[:, 0:1] * pc[..., 0] / zsafe + k[:, 2:3]
    v = k[:, 1:2] * pc[..., 1] / zsafe + k[:, 3:4]
    Wf = scene.planes.shape[3]
    Hf = scene.planes.shape[2]
    # Planes are pixel-aligned with the image: scale image pixel coords to
    # plane texel coords (texel center at integer index).
    sx = Wf / scene.poses[0].image_size[0]
    sy = Hf / scene.poses[0].image_size[1]
    return u * sx - 0.5, v * sy - 0.5, valid


def _polar_plane_coords(scene: IBPlanesScene, pc: torch.Tensor):
    """Camera-frame points -> equirectangular texel coordinates + validity."""
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    r_xz = torch.sqrt(x * x + z * z)
    norm = torch.sqrt(r_xz * r_xz + y * y)
    valid = norm > 0
    azimuth = torch.atan2(x, z)  # [-pi, pi]
    elevation = torch.atan2(-y, r_xz)  # [-pi/2, pi/2], up is positive
    Hp, Wp = scene.polar_planes.shape[2], scene.polar_planes.shape[3]
    px = (azimuth + math.pi) / (2.0 * math.pi) * Wp - 0.5  # wraps horizontally
    py = (math.pi / 2.0 - elevation) / math.pi * Hp - 0.5  # +elevation at top
    return px, py, valid


def decode_points(
    scene: IBPlanesScene,
    params: PointDecoder,
    pts: torch.Tensor,
    dropped: tuple[int, ...] = (),
):
    """Density and color of the neural field at a batch of world points.

    Args:
        pts: (P, 3) world positions (dtype decides compute precision).
        dropped: extra views to exclude on top of `scene.dropped`.

    Returns:
        density: (P,) non-negative, rgb: (P, 3) in [0, 1].
    """
    excluded = set(scene.dropped) | set(dropped)
    active = [v for v in range(scene.num_views) if v not in excluded]
    if not active:
        raise ValueError("all views dropped: at least one active view is required")
    pts = pts.reshape(-1, 3)
    dtype = scene.planes.dtype
    if pts.dtype != dtype:
        pts = pts.to(dtype)

    tensors = scene.pose_tensors(dtype)
    idx = torch.tensor(active, dtype=torch.long)
    R, t = tensors["R"][idx], tensors["t"][idx]
    k, centers = tensors["k"][idx], tensors["centers"][idx]
    pc = torch.einsum("vij,pj->vpi", R, pts) + t[:, None, :]  # (A, P, 3)

    px, py, pin_valid = _pinhole_plane_coords(scene, pc, k)
    feats = []
    for a, v in enumerate(active):
        f = bilinear_interpolate(scene.planes[v], px[a], py[a])  # (P, C)
        feats.append(f * pin_valid[a].unsqueeze(-1).to(dtype))
    parts = [torch.stack(feats)]  # (A, P, C)

    if params.use_polar:
        if scene.polar_planes is None:
            raise ValueError("decoder expects polar planes but the scene has none")
        qx, qy, pol_valid = _polar_plane_coords(scene, pc)
        pfeats = []
        for a, v in enumerate(active):
            f = bilinear_interpolate(scene.polar_planes[v], qx[a], qy[a], wrap_x=True)
            pfeats.append(f * pol_valid[a].unsqueeze(-1).to(dtype))
        parts.append(torch.stack(pfeats))

    dist = torch.linalg.norm(pts[None, :, :] - centers[:, None, :], dim=-1)  # (A, P)
    parts.append(params.dist_embed(dist))

    head_in = torch.cat(parts, dim=-1)  # (A, P, in_dim)
    f_star = params.head(head_in)  # (A, P, hidden)
    fused, _ = max_reduce(f_star, dim=0)  # (P, hidden), ties to lowest view
    out = params.fuse(fused)
    density = torch.nn.functional.softplus(out[:, 0])
    rgb = torch.sigmoid(out[:, 1:])
    return density, rgb


# --- single-point reference API (used by tests and probes) -------------------

def sample_pinhole_feature(scene: IBPlanesScene, v: int, p) -> torch.Tensor:
    """Bilinear sample of view v's pinhole plane at a world point.

    Returns the zero vector for points at/behind the camera plane or for a
    dropped view.
    """
    if v in scene.dropped:
        return torch.zeros(scene.planes.shape[1], dtype=scene.planes.dtype)
    dtype = scene.planes.dtype
    pts = torch.as_tensor(np.asarray(p, dtype=np.float64).reshape(1, 3), dtype=dtype)
    tensors = scene.pose_tensors(dtype)
    pc = torch.einsum("ij,pj->pi", tensors["R"][v], pts) + tensors["t"][v]
    px, py, valid = _pinhole_plane_coords(scene, pc.unsqueeze(0), tensors["k"][v : v + 1])
    if not bool(valid[0, 0]):
        return torch.zeros(scene.planes.shape[1], dtype=dtype)
    return bilinear_interpolate(scene.planes[v], px[0], py[0])[0]


def sample_polar_feature(scene: IBPlanesScene, v: int, p) -> torch.Tensor:
    """Bilinear sample of view v's polar plane (azimuth wraps)."""
    if v in scene.dropped:
        return torch.zeros(scene.polar_planes.shape[1], dtype=scene.polar_planes.dtype)
    dtype = scene.polar_planes.dtype
    pts = torch.as_tensor(np.asarray(p, dtype=np.float64).reshape(1, 3), dtype=dtype)
    tensors = scene.pose_tensors(dtype)
    pc = torch.einsum("ij,pj->pi", tensors["R"][v], pts) + tensors["t"][v]
    qx, qy, valid = _polar_plane_coords(scene, pc.unsqueeze(0))
    if not bool(valid[0, 0]):
        return torch.zeros(scene.polar_planes.shape[1], dtype=dtype)
    return bilinear_interpolate(scene.polar_planes[v], qx[0], qy[0], wrap_x=True)[0]


def point_features(scene: IBPlanesScene, params: PointDecoder, p) -> list[torch.Tensor]:
    """Per-view point features f* for all non-dropped views (in view order)."""
    active = [v for v in range(scene.num_views) if v not in scene.dropped]
    if not active:
        raise ValueError("all views dropped: at least one active view is required")
    dtype = scene.planes.dtype
    pts = torch.as_tensor(np.asarray(p, dtype=np.float64).reshape(1, 3), dtype=dtype)
    tensors = scene.pose_tensors(dtype)
    out = []
    for v in active:
        pin = sample_pinhole_feature(scene, v, p)
        pieces = [pin]
        if params.use_polar:
            pieces.append(sample_polar_feature(scene, v, p))
        dist = torch.linalg.norm(pts[0] - tensors["centers"][v])
        pieces.append(params.dist_embed(dist.reshape(1))[0])
        out.append(params.head(torch.cat(pieces)))
    return out


def fuse_and_decode(features: list[torch.Tensor], params: PointDecoder):
    """Elementwise max over per-view features, then density/color decoding."""
    if len(features) == 0:
        raise ValueError("cannot fuse an empty feature list")
    fused, _ = max_reduce(torch.stack(features), dim=0)
    out = params.fuse(fused)
    return torch.nn.functional.softplus(out[0]), torch.sigmoid(out[1:])
