"""Pinhole camera model and depth-raster helpers.

All lengths are millimetres. Rasters are indexed ``[row, col] == [v, u]``.
Invalid depth is stored as ``0`` (or any non-positive / non-finite value).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class BehindCameraError(ValueError):
    """Raised when a point with non-positive depth is projected."""


class InvalidDepthError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the raster")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_rays(self) -> np.ndarray:
        """Unnormalised rays ``((u-cx)/fx, (v-cy)/fy, 1)`` for every pixel, shape (H, W, 3)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1
        )


@dataclass
class DepthScan:
    """One observation: depth (mm), RGB colour and unit normals on a shared raster."""

    depth: np.ndarray
    intrinsics: CameraIntrinsics
    color: np.ndarray | None = None
    normals: np.ndarray | None = None
    frame_index: int = 0
    _points: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != self.intrinsics.shape:
            raise ValueError(
                f"depth raster {self.depth.shape} does not match intrinsics {self.intrinsics.shape}"
            )
        bad = ~np.isfinite(self.depth) | (self.depth < 0)
        if bad.any():
            self.depth = np.where(bad, 0.0, self.depth)
        if self.color is None:
            self.color = np.zeros(self.depth.shape + (3,), dtype=np.float64)
        else:
            self.color = np.asarray(self.color, dtype=np.float64)
        if self.color.shape != self.depth.shape + (3,):
            raise ValueError("colour raster must be (H, W, 3) matching depth")
        if self.normals is None:
            self.normals = normals_from_depth(self)
        elif self.normals.shape != self.depth.shape + (3,):
            raise ValueError("normal raster must be (H, W, 3) matching depth")

    @property
    def depth_valid(self) -> np.ndarray:
        return self.depth > 0

    @property
    def normal_valid(self) -> np.ndarray:
        return np.any(self.normals != 0, axis=-1)

    @property
    def valid(self) -> np.ndarray:
        """Pixels usable for registration and lifting: valid depth and valid normal."""
        return self.depth_valid & self.normal_valid

    @property
    def points(self) -> np.ndarray:
        """Back-projected points for every pixel (zeros where depth is invalid)."""
        if self._points is None:
            self._points = self.intrinsics.pixel_rays() * self.depth[..., None]
        return self._points


def project(point, intrinsics: CameraIntrinsics):
    """Continuous pixel coordinates of a camera-frame point.

    Returns ``(u, v, in_frame)``; ``in_frame`` is False when the nearest pixel
    falls outside the raster.
    """
    x, y, z = (float(c) for c in point)
    if z <= 0:
        raise BehindCameraError(f"point has non-positive depth z={z}")
    u = intrinsics.fx * x / z + intrinsics.cx
    v = intrinsics.fy * y / z + intrinsics.cy
    col, row = nearest_pixel(u, v)
    in_frame = bool(0 <= col < intrinsics.width and 0 <= row < intrinsics.height)
    return u, v, in_frame


def back_project(pixel, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    u, v = (float(c) for c in pixel)
    if not np.isfinite(depth) or depth <= 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    return np.array(
        [(u - intrinsics.cx) * depth / intrinsics.fx, (v - intrinsics.cy) * depth / intrinsics.fy, depth]
    )


def nearest_pixel(u, v):
    """Round continuous coordinates half-up to integer (col, row)."""
    return np.floor(np.asarray(u) + 0.5).astype(np.int64), np.floor(np.asarray(v) + 0.5).astype(np.int64)


def project_points(points: np.ndarray, intrinsics: CameraIntrinsics):
    """Vectorised projection of (N, 3) camera-frame points.

    Returns ``(uv, rows, cols, ok)`` where ``ok`` marks points in front of the
    camera whose rounded pixel lies inside the raster. ``rows``/``cols`` are
    clipped into range so they can always be used as indices; mask with ``ok``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = points[:, 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = intrinsics.fx * points[:, 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * points[:, 1] / safe_z + intrinsics.cy
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, -1e9)
    v = np.where(finite, v, -1e9)
    cols, rows = nearest_pixel(u, v)
    ok = front & finite & (cols >= 0) & (cols < intrinsics.width) & (rows >= 0) & (rows < intrinsics.height)
    rows = np.clip(rows, 0, intrinsics.height - 1)
    cols = np.clip(cols, 0, intrinsics.width - 1)
    return np.stack([u, v], axis=1), rows, cols, ok


def normals_from_depth(scan: DepthScan, smooth_sigma: float = 0.0) -> np.ndarray:
    """Per-pixel unit normals from central differences of back-projected neighbours.

    Normals face the camera (negative dot product with the viewing ray). Pixels
    with an invalid 4-neighbour, or on the raster border, get a zero normal.
    ``smooth_sigma`` (pixels) applies a validity-weighted Gaussian to the depth
    before differencing; it does not change which pixels are valid.
    """
    depth = np.asarray(scan.depth, dtype=np.float64)
    intr = scan.intrinsics
    valid = depth > 0
    if smooth_sigma > 0:
        mask = valid.astype(np.float64)
        num = ndimage.gaussian_filter(depth * mask, smooth_sigma, mode="constant")
        den = ndimage.gaussian_filter(mask, smooth_sigma, mode="constant")
        depth = np.where(valid, num / np.maximum(den, 1e-12), 0.0)

    pts = intr.pixel_rays() * depth[..., None]
    normals = np.zeros_like(pts)
    h, w = depth.shape
    if h < 3 or w < 3:
        return normals

    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(du, dv)
    ok = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = n / np.where(ok, norm, 1.0)[..., None]
    # orient towards the camera
    flip = np.sum(n * pts[1:-1, 1:-1], axis=-1) > 0
    n[flip] *= -1.0
    n[~ok] = 0.0
    normals[1:-1, 1:-1] = n
    return normals


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def skew(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def rotation_angle_deg(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
