"""Differentiable volumetric ray marching over an IB-planes scene.

Stratified coarse sampling, inverse-CDF importance sampling guided by the
coarse weights, and emission-absorption compositing.  Randomness (depth
jitter, importance draws, background radiance) is seeded per pixel from
(global seed, scene key, view, row, col, diffusion step), so a subsampled
render agrees pixel-for-pixel with the full render.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import rng
from .geometry import CameraPose, rays_for_pixels
from .ibplanes import IBPlanesScene, PointDecoder, decode_points

# Depth sampling defaults: the data generator keeps scene content inside a
# [-1, 1]^3 working box; far = 4x its diagonal leaves generous margin.
DEFAULT_NEAR = 0.05
DEFAULT_FAR = 4.0 * 2.0 * math.sqrt(3.0)

EPS_WEIGHT = 1e-8  # depth normalization floor for empty rays


@dataclass
class RenderConfig:
    n_coarse: int = 32
    n_fine: int = 32
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    chunk: int = 4096  # rays decoded per chunk (memory cap; no effect on values)

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got ({self.near}, {self.far})")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("need n_coarse >= 1 and n_fine >= 0")


@dataclass
class SeedContext:
    """Identifies one rendering stream for per-pixel seeding."""

    global_seed: int
    scene_key: str | int = 0
    step: int = 0

    def base(self) -> int:
        return rng.derive_seed(self.global_seed, self.scene_key, self.step)


@dataclass
class RayBatch:
    """A batch of world-space rays tagged with their source pixels."""

    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3) unit vectors
    views: np.ndarray  # (R,) int view indices
    rows: np.ndarray  # (R,) int
    cols: np.ndarray  # (R,) int

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class RaySamples:
    """Per-ray depth samples with decoded densities and colors."""

    depths: torch.Tensor  # (R, N), ascending
    deltas: torch.Tensor  # (R, N), > 0
    densities: torch.Tensor  # (R, N), >= 0
    colors: torch.Tensor  # (R, N, 3)

    def __post_init__(self):
        if self.depths.shape[-1] < 1:
            raise ValueError("need at least one sample per ray")
        if bool((self.depths.diff(dim=-1) <= 0).any()):
            raise ValueError("sample depths must be strictly ascending")
        if bool((self.deltas <= 0).any()):
            raise ValueError("segment lengths must be positive")


@dataclass
class RenderOutput:
    """Composited colors/depths/opacities for a batch of rays."""

    rgb: torch.Tensor  # (R, 3) in [0, 1]
    depth: torch.Tensor  # (R,) expected termination depth
    opacity: torch.Tensor  # (R,) in [0, 1]
    weights: torch.Tensor  # (R, N) per-sample weights


def rays_for_view(pose: CameraPose, view: int, pixel_indices=None) -> RayBatch:
    """Rays through the pixel centers of one view (all pixels, or a flat
    index subset)."""
    W, H = pose.image_size
    if pixel_indices is None:
        flat = np.arange(H * W)
    else:
        flat = np.asarray(pixel_indices, dtype=np.int64)
        if flat.size and (flat.min() < 0 or flat.max() >= H * W):
            raise ValueError(f"pixel index outside {W}x{H} image")
    rows, cols = flat // W, flat % W
    origin, dirs = rays_for_pixels(pose, rows, cols)
    origins = np.broadcast_to(origin, dirs.shape).copy()
    return RayBatch(origins, dirs, np.full(flat.shape, view, dtype=np.int64), rows, cols)


def subsample_count(fraction: float, W: int, H: int) -> int:
    """Number of pixels rendered at a given ray fraction (round to nearest)."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"ray fraction must be in (0, 1], got {fraction}")
    return int(round(fraction * W * H))


def draw_pixel_subset(fraction: float, W: int, H: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform pixel subset without replacement, sorted flat indices."""
    k = subsample_count(fraction, W, H)
    return np.sort(gen.choice(W * H, size=k, replace=False))


def stratified_depths(near: float, far: float, n: int, u=None) -> np.ndarray:
    """One depth per equal-width bin of [near, far].

    `u` is an optional (R, n) array of uniforms in [0, 1); without it the
    deterministic bin midpoints are returned (shape (n,)).
    """
    if not (0.0 < near < far):
        raise ValueError(f"need 0 < near < far, got ({near}, {far})")
    if n < 1:
        raise ValueError("need at least one sample")
    width = (far - near) / n
    offsets = np.arange(n) * width + near
    if u is None:
        return offsets + 0.5 * width
    u = np.asarray(u, dtype=np.float64)
    return offsets + u * width


def importance_depths(weights, near: float, far: float, m: int, u) -> np.ndarray:
    """Inverse-CDF samples from the piecewise-constant PDF proportional to
    per-bin weights over the equal-width coarse bins of [near, far].

    Falls back to the uniform distribution for rays whose weights are all
    zero.  `u`: (R, m) uniforms; returns (R, m) depths (unsorted).
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    u = np.asarray(u, dtype=np.float64).reshape(w.shape[0], m)
    R, n = w.shape
    w = np.clip(w, 0.0, None)
    total = w.sum(axis=1, keepdims=True)
    flat_rows = total[:, 0] <= 0.0
    if flat_rows.any():
        w = w.copy()
        w[flat_rows] = 1.0
        total = w.sum(axis=1, keepdims=True)
    pdf = w / total
    cdf = np.cumsum(pdf, axis=1)
    cdf[:, -1] = 1.0

    # Row-wise searchsorted via an offset trick (cdf values live in [0, 1]).
    offset = 2.0 * np.arange(R)[:, None]
    k = np.searchsorted((cdf + offset).ravel(), (u + offset).ravel(), side="right")
    k = (k - np.repeat(np.arange(R), m) * n).reshape(R, m)
    k = np.clip(k, 0, n - 1)

    prev = np.concatenate([np.zeros((R, 1)), cdf[:, :-1]], axis=1)
    lo = np.take_along_axis(prev, k, axis=1)
    mass = np.take_along_axis(pdf, k, axis=1)
    frac = (u - lo) / np.maximum(mass, 1e-300)
    width = (far - near) / n
    return near + (k + np.clip(frac, 0.0, 1.0)) * width


def _alpha_weights(densities: torch.Tensor, deltas: torch.Tensor):
    """Emission-absorption weights: alpha_i = 1 - exp(-sigma_i delta_i),
    w_i = alpha_i * prod_{j<i} (1 - alpha_j)."""
    trans_step = torch.exp(-densities * deltas)  # = 1 - alpha
    alpha = 1.0 - trans_step
    ones = torch.ones_like(trans_step[:, :1])
    transmittance = torch.cumprod(torch.cat([ones, trans_step[:, :-1]], dim=1), dim=1)
    return alpha * transmittance


def composite(samples: RaySamples, background) -> RenderOutput:
    """Composite ray samples over a background radiance.

    The background receives exactly the leftover weight 1 - sum(w), so
    total weight is conserved by construction and zero-density rays return
    the background color unchanged.
    """
    weights = _alpha_weights(samples.densities, samples.deltas)
    opacity = weights.sum(dim=1)
    bg = torch.as_tensor(background, dtype=samples.colors.dtype)
    if bg.ndim == 1:
        bg = bg.expand(weights.shape[0], 3)
    rgb = (weights.unsqueeze(-1) * samples.colors).sum(dim=1) + (1.0 - opacity).unsqueeze(-1) * bg
    depth = (weights * samples.depths).sum(dim=1) / torch.clamp(opacity, min=EPS_WEIGHT)
    return RenderOutput(rgb=rgb, depth=depth, opacity=opacity, weights=weights)


def render_rays(
    scene: IBPlanesScene,
    params: PointDecoder,
    rays: RayBatch,
    cfg: RenderConfig,
    seed_ctx: SeedContext,
    exclude_view: int | None = None,
    train_mode: bool = False,
) -> RenderOutput:
    """Full coarse+fine pipeline for a batch of rays.

    `exclude_view` applies representation dropout (that view's planes are
    excluded from every point query).  In train mode the background radiance
    is drawn uniformly per ray; otherwise it is fixed to mid-gray.
    """
    if exclude_view is not None and scene.num_views == 1:
        raise ValueError("cannot exclude the only view of a single-view scene")
    dropped = (exclude_view,) if exclude_view is not None else ()
    dtype = scene.planes.dtype
    R = len(rays)
    nc, nf = cfg.n_coarse, cfg.n_fine

    seeds = rng.combine(seed_ctx.base(), rays.views, rays.rows, rays.cols)
    u = rng.uniforms(seeds, nc + nf + 3)

    outputs = []
    for start in range(0, R, cfg.chunk):
        sl = slice(start, min(start + cfg.chunk, R))
        outputs.append(
            _render_chunk(
                scene,
                params,
                rays.origins[sl],
                rays.directions[sl],
                u[sl],
                cfg,
                dropped,
                train_mode,
                dtype,
            )
        )
    if len(outputs) == 1:
        return outputs[0]
    return RenderOutput(
        rgb=torch.cat([o.rgb for o in outputs]),
        depth=torch.cat([o.depth for o in outputs]),
        opacity=torch.cat([o.opacity for o in outputs]),
        weights=torch.cat([o.weights for o in outputs]),
    )


def _render_chunk(scene, params, origins, directions, u, cfg, dropped, train_mode, dtype):
    R = origins.shape[0]
    nc, nf = cfg.n_coarse, cfg.n_fine
    origins_t = torch.as_tensor(origins, dtype=dtype)
    dirs_t = torch.as_tensor(directions, dtype=dtype)

    def decode_at(depths_np: np.ndarray):
        d = torch.as_tensor(depths_np, dtype=dtype)
        pts = origins_t[:, None, :] + dirs_t[:, None, :] * d[:, :, None]
        density, color = decode_points(scene, params, pts.reshape(-1, 3), dropped=dropped)
        return d, density.reshape(R, -1), color.reshape(R, -1, 3)

    d_coarse = stratified_depths(cfg.near, cfg.far, nc, u[:, :nc])
    dc, sigma_c, color_c = decode_at(d_coarse)
    deltas_c = _segment_lengths(dc, cfg.far)
    coarse_w = _alpha_weights(sigma_c, deltas_c)

    if nf > 0:
        d_fine = importance_depths(
            coarse_w.detach().cpu().numpy(), cfg.near, cfg.far, nf, u[:, nc : nc + nf]
        )
        df, sigma_f, color_f = decode_at(d_fine)
        merged = torch.cat([dc, df], dim=1)
        order = torch.argsort(merged, dim=1)
        # Nudge ties apart so depths stay strictly ascending.
        bump = torch.arange(nc + nf, dtype=dtype) * 1e-12
        depths = torch.gather(merged, 1, order) + bump
        sigma = torch.gather(torch.cat([sigma_c, sigma_f], dim=1), 1, order)
        color = torch.gather(
            torch.cat([color_c, color_f], dim=1), 1, order.unsqueeze(-1).expand(-1, -1, 3)
        )
    else:
        depths, sigma, color = dc, sigma_c, color_c

    deltas = _segment_lengths(depths, cfg.far)
    if train_mode:
        background = torch.as_tensor(u[:, nc + nf :], dtype=dtype)
    else:
        background = torch.full((R, 3), 0.5, dtype=dtype)
    samples = RaySamples(depths=depths, deltas=deltas, densities=sigma, colors=color)
    return composite(samples, background)


def _segment_lengths(depths: torch.Tensor, far: float) -> torch.Tensor:
    last = torch.clamp(far - depths[:, -1:], min=1e-9)
    if depths.shape[1] == 1:
        return last
    return torch.cat([depths.diff(dim=1).clamp(min=1e-12), last], dim=1)


@dataclass
class ImageRender:
    """Full or subsampled single-view render as dense maps plus a mask."""

    image: torch.Tensor  # (H, W, 3); absent pixels 0
    depth: torch.Tensor  # (H, W)
    opacity: torch.Tensor  # (H, W)
    mask: np.ndarray  # (H, W) bool, True where rendered
    rays: RenderOutput


def render_image(
    scene: IBPlanesScene,
    params: PointDecoder,
    pose: CameraPose,
    cfg: RenderConfig,
    seed_ctx: SeedContext,
    view: int = 0,
    subsample=None,
    train_mode: bool = False,
) -> ImageRender:
    """Render one view; `subsample` restricts rendering to a flat pixel
    index subset (absent pixels are zero in the dense maps)."""
    W, H = pose.image_size
    rays = rays_for_view(pose, view, subsample)
    out = render_rays(scene, params, rays, cfg, seed_ctx, train_mode=train_mode)
    dtype = out.rgb.dtype
    image = torch.zeros(H * W, 3, dtype=dtype)
    depth = torch.zeros(H * W, dtype=dtype)
    opacity = torch.zeros(H * W, dtype=dtype)
    flat = rays.rows * W + rays.cols
    idx = torch.as_tensor(flat, dtype=torch.long)
    image[idx] = out.rgb
    depth[idx] = out.depth
    opacity[idx] = out.opacity
    mask = np.zeros(H * W, dtype=bool)
    mask[flat] = True
    return ImageRender(
        image=image.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        opacity=opacity.reshape(H, W),
        mask=mask.reshape(H, W),
        rays=out,
    )
