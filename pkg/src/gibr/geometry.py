"""Camera models and multi-view geometry.

Conventions (shared by the renderer, the encoder and the data generator):
  * extrinsics are 4x4 world-to-camera rigid transforms, row-major,
    right-handed; the camera looks down +z with y pointing down in the
    image,
  * intrinsics are 3x3 pinhole matrices in pixel units,
  * pixel (row, col) has its center at image coordinates
    (col + 0.5, row + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Points with camera-space depth at or below this are invalid for pinhole
# projection (at/behind the camera plane).
EPS_Z = 1e-6


class PoseError(ValueError):
    """Raised for malformed camera poses or pose files."""


@dataclass
class CameraPose:
    """Extrinsics + intrinsics + image size of one view."""

    extrinsics: np.ndarray  # (4, 4) world-to-camera
    intrinsics: np.ndarray  # (3, 3) pinhole
    image_size: tuple[int, int]  # (W, H) pixels

    def __post_init__(self):
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.validate()

    def validate(self):
        R = self.extrinsics[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise PoseError("rotation block is not orthonormal")
        if np.linalg.det(R) < 0.0:
            raise PoseError("rotation has negative determinant (reflection)")
        if not np.allclose(self.extrinsics[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise PoseError("last extrinsics row must be (0, 0, 0, 1)")
        fx, fy = self.intrinsics[0, 0], self.intrinsics[1, 1]
        if fx <= 0.0 or fy <= 0.0:
            raise PoseError(f"focal lengths must be positive, got ({fx}, {fy})")
        if not np.all(np.isfinite(self.intrinsics)):
            raise PoseError("intrinsics contain non-finite values")
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise PoseError(f"bad image size {self.image_size}")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> "CameraPose":
        """Same camera with image resolution scaled by `factor`."""
        K = self.intrinsics.copy()
        K[:2] *= factor
        W, H = self.image_size
        return CameraPose(self.extrinsics.copy(), K, (round(W * factor), round(H * factor)))


@dataclass
class Ray:
    """World-space ray through one pixel center."""

    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,), unit norm
    pixel_index: tuple[int, int, int] = field(default=(0, 0, 0))  # (view, row, col)


def project(p, pose: CameraPose):
    """Pinhole projection of a world point.

    Returns (uv, depth) where uv is the (2,) pixel-space location and depth
    the z-coordinate in the camera frame.  For points at or behind the
    camera plane (depth <= EPS_Z) uv is None.
    """
    p = np.asarray(p, dtype=np.float64)
    pc = pose.rotation @ p + pose.translation
    depth = float(pc[2])
    if depth <= EPS_Z:
        return None, depth
    uv = pose.intrinsics[:2, :2].diagonal() * pc[:2] / depth + pose.intrinsics[:2, 2]
    return uv, depth


def project_points(pts, pose: CameraPose):
    """Vectorized pinhole projection.

    Args:
        pts: (N, 3) world points.

    Returns:
        uv: (N, 2) pixel coords (unspecified where invalid),
        depth: (N,) camera-space z,
        valid: (N,) bool, depth > EPS_Z.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    pc = pts @ pose.rotation.T + pose.translation
    depth = pc[:, 2]
    valid = depth > EPS_Z
    z = np.where(valid, depth, 1.0)
    fx, fy = pose.intrinsics[0, 0], pose.intrinsics[1, 1]
    cx, cy = pose.intrinsics[0, 2], pose.intrinsics[1, 2]
    uv = np.stack([fx * pc[:, 0] / z + cx, fy * pc[:, 1] / z + cy], axis=1)
    return uv, depth, valid


def equirect_project(p, pose: CameraPose):
    """Equirectangular (polar) coordinates of a point relative to a camera.

    Total over the sphere: any point except the camera center itself maps to
    azimuth in [-pi, pi) and elevation in [-pi/2, pi/2].  Azimuth 0 is the
    optical axis, elevation is positive above the horizon (camera -y).
    Returns None for p exactly at the camera center.
    """
    p = np.asarray(p, dtype=np.float64)
    d = pose.rotation @ p + pose.translation
    n = np.linalg.norm(d)
    if n == 0.0:
        return None
    azimuth = math.atan2(d[0], d[2])
    if azimuth == math.pi:
        azimuth = -math.pi
    elevation = math.atan2(-d[1], math.hypot(d[0], d[2]))
    return azimuth, elevation


def ray_for_pixel(pose: CameraPose, row: int, col: int) -> Ray:
    """World-space ray through the center of pixel (row, col)."""
    W, H = pose.image_size
    if not (0 <= row < H and 0 <= col < W):
        raise ValueError(f"pixel ({row}, {col}) outside {W}x{H} image")
    origin, dirs = rays_for_pixels(pose, np.array([row]), np.array([col]))
    return Ray(origin, dirs[0], (0, row, col))


def rays_for_pixels(pose: CameraPose, rows, cols):
    """Rays through many pixel centers of one camera.

    Returns (origin (3,), directions (N, 3) unit vectors).
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    fx, fy = pose.intrinsics[0, 0], pose.intrinsics[1, 1]
    cx, cy = pose.intrinsics[0, 2], pose.intrinsics[1, 2]
    x = (cols + 0.5 - cx) / fx
    y = (rows + 0.5 - cy) / fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_world = d_cam @ pose.rotation  # R^T applied to each row
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return pose.center, d_world


def relative_poses(poses: list[CameraPose], ref: int = 0) -> list[CameraPose]:
    """Re-express a set of poses relative to one reference view.

    The reference view gets identity extrinsics; all pairwise relative
    transforms (and intrinsics) are preserved.
    """
    if len(poses) == 0:
        raise ValueError("relative_poses needs at least one pose")
    if not (0 <= ref < len(poses)):
        raise ValueError(f"reference index {ref} out of range for {len(poses)} poses")
    inv_ref = np.linalg.inv(poses[ref].extrinsics)
    out = []
    for pose in poses:
        E = pose.extrinsics @ inv_ref
        # Re-orthonormalize against accumulated round-off.
        u, _, vt = np.linalg.svd(E[:3, :3])
        E[:3, :3] = u @ vt
        E[3] = (0.0, 0.0, 0.0, 1.0)
        out.append(CameraPose(E, pose.intrinsics.copy(), pose.image_size))
    return out


def pose_flatten(pose: CameraPose) -> np.ndarray:
    """Flatten a pose to the 25-vector fed to the pose-embedding MLPs.

    Extrinsics first (16 values, row-major), then intrinsics (9 values)
    with rows scaled by (1/W, 1/W, 1/H) so the embedding does not depend
    on the absolute resolution.
    """
    W, H = pose.image_size
    K = pose.intrinsics / np.array([[W], [W], [H]], dtype=np.float64)
    return np.concatenate([pose.extrinsics.reshape(16), K.reshape(9)])


def pose_unflatten(vec, image_size) -> CameraPose:
    """Inverse of pose_flatten for a known image size."""
    vec = np.asarray(vec, dtype=np.float64).reshape(25)
    W, H = image_size
    K = vec[16:].reshape(3, 3) * np.array([[W], [W], [H]], dtype=np.float64)
    return CameraPose(vec[:16].reshape(4, 4), K, (W, H))


def look_at(eye, target, pose_up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-to-camera extrinsics for a camera at `eye` looking at `target`.

    `pose_up` is the world direction that should point up in the image
    (default -y, matching the y-down world used by the data generator).
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - eye
    zn = np.linalg.norm(z)
    if zn < 1e-12:
        raise ValueError("look_at target coincides with eye")
    z = z / zn
    up = np.asarray(pose_up, dtype=np.float64)
    x = np.cross(-up, z)
    xn = np.linalg.norm(x)
    if xn < 1e-9:  # looking straight along up: pick any orthogonal x
        x = np.cross(z, [1.0, 0.0, 0.0])
        xn = np.linalg.norm(x)
        if xn < 1e-9:
            x = np.cross(z, [0.0, 0.0, 1.0])
            xn = np.linalg.norm(x)
    x = x / xn
    y = np.cross(z, x)
    E = np.eye(4)
    E[:3, :3] = np.stack([x, y, z])
    E[:3, 3] = -E[:3, :3] @ eye
    return E


def save_pose_text(pose: CameraPose) -> str:
    """Serialize a pose to the plain-text interchange format.

    4 lines of 4 floats (extrinsics), 3 lines of 3 floats (intrinsics),
    one line `W H`.
    """
    lines = []
    for row in pose.extrinsics:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    for row in pose.intrinsics:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    lines.append(f"{pose.image_size[0]} {pose.image_size[1]}")
    return "\n".join(lines) + "\n"


def load_pose_text(text: str, source: str = "<pose>") -> CameraPose:
    """Parse the pose text format; errors carry the offending line number."""
    rows = []
    lineno_of = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise PoseError(f"{source}:{lineno}: {exc}") from None
        lineno_of.append(lineno)
    if len(rows) != 8:
        raise PoseError(f"{source}: expected 8 non-empty lines, found {len(rows)}")
    widths = [4, 4, 4, 4, 3, 3, 3, 2]
    for row, want, lineno in zip(rows, widths, lineno_of):
        if len(row) != want:
            raise PoseError(f"{source}:{lineno}: expected {want} values, found {len(row)}")
    extr = np.array(rows[:4])
    intr = np.array(rows[4:7])
    W, H = int(rows[7][0]), int(rows[7][1])
    try:
        return CameraPose(extr, intr, (W, H))
    except PoseError as exc:
        raise PoseError(f"{source}: {exc}") from None
