"""Synthetic pinhole depth camera: raycasting, sensor noise, back-projection.

Camera frame convention (standard optical): x right, y down, z along the
optical axis. Depth values are z-depths (distance along the optical axis,
not euclidean ray length), matching stereo depth sensors. Pixels with no
return within max_range carry NaN.

The default mount maps the optical axis onto the vehicle's body x (forward),
image-right onto body y, image-down onto body z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .se3 import Pose, quat_from_matrix, transform_points
from .world import WorldModel

INVALID_DEPTH = np.nan

# columns are the camera basis vectors expressed in the body frame
CAM_TO_BODY = np.array([
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
])

FORWARD_MOUNT = Pose(np.zeros(3), quat_from_matrix(CAM_TO_BODY))


@dataclass(frozen=True)
class CameraModel:
    width: int = 128
    height: int = 85
    horizontal_fov_deg: float = 87.0
    vertical_fov_deg: float = 58.0
    max_range: float = 20.0
    rate_hz: float = 30.0
    mount_pose: Pose = FORWARD_MOUNT  # camera frame -> body frame

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")
        if not (0.0 < self.horizontal_fov_deg < 180.0 and 0.0 < self.vertical_fov_deg < 180.0):
            raise ValueError("fov must be in (0, 180) degrees")
        if self.max_range <= 0.0:
            raise ValueError("max_range must be positive")

    @property
    def fx(self) -> float:
        return (self.width / 2.0) / np.tan(np.radians(self.horizontal_fov_deg) / 2.0)

    @property
    def fy(self) -> float:
        return (self.height / 2.0) / np.tan(np.radians(self.vertical_fov_deg) / 2.0)

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2.0

    def ray_grid(self) -> np.ndarray:
        """(H*W, 3) camera-frame ray directions with unit z component.

        With unit-z directions the ray parameter t is the z-depth directly.
        """
        return _ray_grid(self.width, self.height,
                         self.horizontal_fov_deg, self.vertical_fov_deg)


@lru_cache(maxsize=8)
def _ray_grid(width, height, hfov, vfov):
    cam = CameraModel(width, height, hfov, vfov)
    u = (np.arange(width) - cam.cx) / cam.fx
    v = (np.arange(height) - cam.cy) / cam.fy
    uu, vv = np.meshgrid(u, v)
    dirs = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return dirs.reshape(-1, 3)


@dataclass
class DepthImage:
    depths: np.ndarray  # (height, width) z-depth in m, NaN where no return
    pose: Pose          # camera frame -> world frame
    timestamp: float = 0.0

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depths)


def render_depth(world: WorldModel, camera: CameraModel, camera_pose: Pose,
                 timestamp: float = 0.0) -> DepthImage:
    """Raycast the world through the pinhole model.

    camera_pose maps camera frame -> world frame. Each pixel holds the
    z-depth of the nearest surface along its ray, NaN when nothing is hit
    within max_range.
    """
    dirs_cam = camera.ray_grid()
    rot = camera_pose.rotation_matrix()
    dirs_world = dirs_cam @ rot.T
    origin = camera_pose.translation
    t = raycast(world, origin, dirs_world)
    t[t > camera.max_range] = INVALID_DEPTH
    return DepthImage(t.reshape(camera.height, camera.width), camera_pose, timestamp)


def raycast(world: WorldModel, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Nearest-hit ray parameter per direction; NaN where nothing is hit.

    The parameter is measured in units of each direction vector's length,
    so callers using unit-z camera rays receive z-depths.
    """
    dirs = np.asarray(dirs, dtype=float)
    origin = np.asarray(origin, dtype=float)
    best = np.full(len(dirs), np.inf)
    # zero components -> huge inverse: slab test still resolves correctly
    safe = np.where(np.abs(dirs) < 1e-300, 1e-300, dirs)
    inv = 1.0 / safe

    lo, hi = world.box_corners()
    for b in range(len(lo)):
        t1 = (lo[b] - origin) * inv
        t2 = (hi[b] - origin) * inv
        tnear = np.minimum(t1, t2).max(axis=1)
        tfar = np.maximum(t1, t2).min(axis=1)
        hit = (tfar >= tnear) & (tfar > 0.0)
        thit = np.where(tnear > 0.0, tnear, tfar)
        best = np.where(hit & (thit < best), thit, best)

    if len(world.triangles):
        best = np.minimum(best, _raycast_triangles(world.triangles, origin, dirs))

    best[~np.isfinite(best)] = INVALID_DEPTH
    return best


def _raycast_triangles(tris: np.ndarray, origin: np.ndarray, dirs: np.ndarray,
                       chunk: int = 256) -> np.ndarray:
    """Moller-Trumbore over (T, 3, 3) triangles, chunked to bound memory."""
    best = np.full(len(dirs), np.inf)
    for s in range(0, len(tris), chunk):
        t0 = tris[s:s + chunk, 0]
        e1 = tris[s:s + chunk, 1] - t0
        e2 = tris[s:s + chunk, 2] - t0
        pvec = np.cross(dirs[:, None, :], e2[None, :, :])
        det = np.einsum("ptd,td->pt", pvec, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_det = 1.0 / det
            tvec = origin - t0
            u = np.einsum("ptd,td->pt", pvec, tvec) * inv_det
            qvec = np.cross(tvec, e1)
            v = np.einsum("pd,td->pt", dirs, qvec) * inv_det
            t = np.einsum("td,td->t", qvec, e2)[None, :] * inv_det
        ok = (np.abs(det) > 1e-12) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        t = np.where(ok, t, np.inf)
        best = np.minimum(best, t.min(axis=1))
    return best


def add_depth_noise(img: DepthImage, sigma: float, rng_seed: int) -> DepthImage:
    """Perturb valid pixels with i.i.d. N(0, sigma^2); invalid stay invalid.

    Noisy depths are clipped to (0, max) of the original image's finite
    support so a perturbation cannot fabricate or destroy a return.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return DepthImage(img.depths.copy(), img.pose, img.timestamp)
    rng = np.random.default_rng(rng_seed)
    noise = rng.normal(scale=sigma, size=img.depths.shape)
    mask = img.valid_mask()
    depths = img.depths.copy()
    depths[mask] = np.maximum(depths[mask] + noise[mask], 1e-6)
    return DepthImage(depths, img.pose, img.timestamp)


def to_point_cloud(img: DepthImage, camera: CameraModel, downsample: int = 1) -> np.ndarray:
    """Back-project every downsample-th pixel (flat row-major stride) that
    holds a valid depth. Returns (N, 3) points in the camera frame.
    """
    if downsample < 1:
        raise ValueError("downsample must be >= 1")
    dirs = camera.ray_grid()[::downsample]
    z = img.depths.reshape(-1)[::downsample]
    keep = np.isfinite(z)
    return dirs[keep] * z[keep, None]


def point_cloud_world(img: DepthImage, camera: CameraModel, downsample: int = 1) -> np.ndarray:
    """Back-project and transform into the world frame."""
    return transform_points(img.pose, to_point_cloud(img, camera, downsample))
