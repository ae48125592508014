"""Synthetic deforming height-field scenes rendered through a moving pinhole camera.

World frame: the camera of frame 0 for the built-in trajectories; the surface
is a height field ``z = h(x, y, frame)`` facing the camera at roughly
``distance`` mm. Material points keep their ``(x, y)`` and move only in z, so
feature tracks and colours are functions of ``(x, y)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import cKDTree

from .io import read_surface_points
from .geometry import CameraIntrinsics, DepthScan, normals_from_depth, project_points, rotation_matrix
from .posefeed import FeatureCorrespondence, PosePrior


class EmptyScanError(RuntimeError):
    """The camera sees no part of the surface."""


SURFACES = ("plane", "sine", "hemisphere", "mesh")
TRAJECTORIES = ("identity", "smooth", "fast", "explicit")


@dataclass
class SceneSpec:
    surface: str = "sine"
    extent: float = 120.0  # mm, side of the square surface patch
    distance: float = 50.0  # mm, base height of the surface
    amplitude: float = 2.5  # mm
    wavelength: float = 40.0  # mm
    frequency: float = 0.05  # deformation cycles per frame
    static_amplitude: float = 0.0  # mm, time-invariant relief added to every surface
    dome_radius: float = 20.0  # mm
    perturbation: float = 0.0  # mm, magnitude of the random per-frame bump (0 = off)
    perturbation_radius: float = 6.0  # mm
    trajectory: str = "identity"
    max_translation: float = 2.0  # mm per frame
    max_rotation: float = 2.0  # degrees per frame
    poses: list | None = None  # explicit [(R, T), ...] when trajectory == "explicit"
    noise: float = 0.0  # mm, depth noise sigma
    prior_translation_noise: float = 0.0  # mm
    prior_rotation_noise: float = 0.0  # degrees
    correspondences: int = 20
    correspondence_noise: float = 0.0  # mm, feature localisation noise on both endpoints
    frames: int = 10
    seed: int = 0
    width: int = 160
    height: int = 120
    fx: float = 140.0
    fy: float = 140.0
    cx: float | None = None
    cy: float | None = None
    normal_smoothing: float = 0.0  # pixels
    truth_spacing: float = 0.5  # mm
    mesh_path: str | None = None  # ASCII PLY whose vertices define the relief when surface == "mesh"

    def __post_init__(self):
        if self.surface not in SURFACES:
            raise ValueError(f"unknown surface {self.surface!r}; choose from {SURFACES}")
        if self.surface == "mesh" and not self.mesh_path:
            raise ValueError("surface 'mesh' needs mesh_path")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}; choose from {TRAJECTORIES}")
        if self.amplitude < 0 or self.perturbation < 0 or self.noise < 0 or self.correspondence_noise < 0:
            raise ValueError("amplitude, perturbation and noise must be non-negative")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.trajectory == "explicit" and (self.poses is None or len(self.poses) < self.frames):
            raise ValueError("explicit trajectory needs one pose per frame")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        cx = (self.width - 1) / 2.0 if self.cx is None else self.cx
        cy = (self.height - 1) / 2.0 if self.cy is None else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy, self.width, self.height)

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "SceneSpec":
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in kv.items():
            if key not in types or key == "poses":
                raise ValueError(f"unknown scene key {key!r}")
            t = str(types[key])
            if raw.lower() in ("none", ""):
                out[key] = None
            elif "int" in t and "float" not in t:
                out[key] = int(raw)
            elif "float" in t:
                out[key] = float(raw)
            else:
                out[key] = raw
        return cls(**out)

    def to_kv(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self) if f.name != "poses"}


@dataclass
class GroundTruth:
    """Truth for one frame: world-to-camera pose, surface samples, tracks and a clean scan."""

    frame: int
    R: np.ndarray
    T: np.ndarray
    points: np.ndarray  # world frame surface samples
    normals: np.ndarray
    correspondences: list[FeatureCorrespondence] = field(default_factory=list)
    clean_scan: DepthScan | None = None


@dataclass
class RenderedFrame:
    scan: DepthScan
    prior: PosePrior
    correspondences: list[FeatureCorrespondence]
    truth: GroundTruth


# --------------------------------------------------------------------------- surface


class Scene:
    """Deterministic scene evaluator for a :class:`SceneSpec`."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 7919])
        half = spec.extent / 2.0
        n = spec.frames
        self._bumps = np.zeros((n, 4))  # cx, cy, signed magnitude, radius
        if spec.perturbation > 0:
            self._bumps[:, 0:2] = rng.uniform(-half * 0.6, half * 0.6, (n, 2))
            mag = rng.uniform(0.8, 1.2, n) * spec.perturbation
            self._bumps[:, 2] = mag * rng.choice([-1.0, 1.0], n)
            self._bumps[:, 3] = spec.perturbation_radius
            self._bumps[0, 2] = 0.0  # frame 0 is the undisturbed surface
        self._relief = self._load_relief() if spec.surface == "mesh" else None
        self._poses = self._make_trajectory()

    def _load_relief(self):
        v = read_surface_points(self.spec.mesh_path)
        if len(v) < 3:
            raise ValueError(f"{self.spec.mesh_path}: mesh needs at least 3 vertices")
        # vertices are taken in the scene frame; relief is z about the median, zero outside the hull
        return LinearNDInterpolator(v[:, :2], v[:, 2] - np.median(v[:, 2]), fill_value=0.0)

    # height field ---------------------------------------------------------
    def height(self, x, y, frame: int) -> np.ndarray:
        s = self.spec
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        k = 2.0 * math.pi / s.wavelength
        phase = math.cos(2.0 * math.pi * s.frequency * frame)
        z = np.full(np.broadcast(x, y).shape, s.distance)
        if s.static_amplitude:
            z = z + s.static_amplitude * np.sin(k * x + 0.7) * np.cos(k * y - 0.3)
        if s.surface == "sine":
            z = z + s.amplitude * np.sin(k * x) * np.sin(k * y) * phase
        elif s.surface == "mesh":
            z = z + self._relief(x, y) + s.amplitude * np.sin(k * x) * np.sin(k * y) * phase
        elif s.surface == "hemisphere":
            rho2 = x * x + y * y
            scale = 1.0 + (s.amplitude / s.dome_radius) * math.sin(2.0 * math.pi * s.frequency * frame)
            cap = np.sqrt(np.clip(s.dome_radius**2 - rho2, 0.0, None))
            z = z - scale * cap
        for cx, cy, mag, rad in self._bumps[1 : frame + 1]:
            if mag:
                z = z + mag * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * rad * rad))
        return z

    def height_gradient(self, x, y, frame: int, h: float = 1e-4):
        gx = (self.height(x + h, y, frame) - self.height(x - h, y, frame)) / (2 * h)
        gy = (self.height(x, y + h, frame) - self.height(x, y - h, frame)) / (2 * h)
        return gx, gy

    def surface_normals(self, x, y, frame: int) -> np.ndarray:
        """Unit normals pointing towards -z (towards a camera looking along +z)."""
        gx, gy = self.height_gradient(x, y, frame)
        n = np.stack([gx, gy, -np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def inside(self, x, y) -> np.ndarray:
        half = self.spec.extent / 2.0
        return (np.abs(x) <= half) & (np.abs(y) <= half)

    def height_range(self, frame: int) -> tuple[float, float]:
        half = self.spec.extent / 2.0
        g = np.linspace(-half, half, 241)
        z = self.height(g[:, None], g[None, :], frame)
        return float(z.min()) - 0.5, float(z.max()) + 0.5

    def color(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        r = 150 + 60 * np.sin(x / 3.0) * np.cos(y / 5.0)
        g = 90 + 40 * np.sin((x + y) / 4.0)
        b = 80 + 30 * np.cos(x / 7.0 - y / 2.0)
        return np.stack([r, g, b], axis=-1)

    # trajectory -----------------------------------------------------------
    def _make_trajectory(self):
        s = self.spec
        n = s.frames
        if s.trajectory == "explicit":
            return [(np.asarray(R, dtype=np.float64), np.asarray(T, dtype=np.float64)) for R, T in s.poses[:n]]
        if s.trajectory == "identity":
            return [(np.eye(3), np.zeros(3)) for _ in range(n)]
        rng = np.random.default_rng([s.seed, 104729])
        if s.trajectory == "smooth":
            # bounded oscillation: each step stays within max_translation / max_rotation
            t_amp = rng.uniform(0.5, 1.0, 3) * s.max_translation * 3.0
            t_per = rng.uniform(20.0, 40.0, 3)
            r_amp = rng.uniform(0.5, 1.0, 3) * s.max_rotation * 3.0
            r_per = rng.uniform(20.0, 40.0, 3)
            t_phase = rng.uniform(0, 2 * math.pi, 3)
            r_phase = rng.uniform(0, 2 * math.pi, 3)
            centers, angles = [], []
            for f in range(n):
                c = t_amp * (np.sin(2 * math.pi * f / t_per + t_phase) - np.sin(t_phase))
                a = r_amp * (np.sin(2 * math.pi * f / r_per + r_phase) - np.sin(r_phase))
                centers.append(c)
                angles.append(a)
            centers = _limit_steps(np.array(centers), s.max_translation)
            angles = _limit_steps(np.array(angles), s.max_rotation)
        else:  # fast: jumps of max_translation per frame with random direction, bounded drift
            centers = [np.zeros(3)]
            angles = [np.zeros(3)]
            for _ in range(1, n):
                d = rng.normal(size=3)
                d[2] *= 0.3
                d /= np.linalg.norm(d)
                # pull back towards the start so the surface stays in view
                c = centers[-1]
                if np.linalg.norm(c) > 2.0 * s.max_translation:
                    d = -c / np.linalg.norm(c) + 0.5 * d
                    d /= np.linalg.norm(d)
                centers.append(c + s.max_translation * d)
                a = angles[-1] + rng.uniform(-1, 1, 3) * s.max_rotation / math.sqrt(3.0)
                angles.append(np.clip(a, -3 * s.max_rotation, 3 * s.max_rotation))
            centers = np.array(centers)
            angles = np.array(angles)
        poses = []
        for c, a in zip(centers, angles):
            Rcw = (
                rotation_matrix([0, 0, 1], math.radians(a[2]))
                @ rotation_matrix([0, 1, 0], math.radians(a[1]))
                @ rotation_matrix([1, 0, 0], math.radians(a[0]))
            )
            # camera orientation Rcw (camera-to-world), centre c; world-to-camera is (Rcw^T, -Rcw^T c)
            R = Rcw.T
            poses.append((R, -R @ c))
        return poses

    def pose(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        R, T = self._poses[frame]
        return R.copy(), T.copy()

    # rendering ------------------------------------------------------------
    def raycast(self, frame: int) -> np.ndarray:
        """Noise-free camera-frame depth for every pixel (0 where nothing is hit)."""
        s = self.spec
        intr = s.intrinsics
        R, T = self.pose(frame)
        origin = -R.T @ T
        rays = intr.pixel_rays().reshape(-1, 3) @ R  # world directions, camera z component 1
        dz = rays[:, 2]
        zlo, zhi = self.height_range(frame)
        depth = np.zeros(len(rays))
        ok = dz > 1e-9
        if not ok.any():
            return depth.reshape(intr.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            s0 = np.where(ok, (zlo - origin[2]) / dz, 0.0)
            s1 = np.where(ok, (zhi - origin[2]) / dz, 0.0)
        s0 = np.maximum(s0, 1e-6)
        ok &= s1 > s0

        def g(sv, idx):
            p = origin + sv[:, None] * rays[idx]
            return p[:, 2] - self.height(p[:, 0], p[:, 1], frame)

        idx = np.flatnonzero(ok)
        lo, hi = s0[idx], s1[idx]
        # march for the first crossing, then bisect
        n_steps = int(np.ceil(np.max((hi - lo) * np.linalg.norm(rays[idx], axis=1)) / 0.2)) + 2 if len(idx) else 2
        n_steps = min(max(n_steps, 8), 400)
        found = np.zeros(len(idx), dtype=bool)
        a = lo.copy()
        b = hi.copy()
        prev_s = lo.copy()
        prev_g = g(prev_s, idx)
        for i in range(1, n_steps + 1):
            cur_s = lo + (hi - lo) * i / n_steps
            cur_g = g(cur_s, idx)
            hit = (~found) & (prev_g <= 0) & (cur_g > 0)
            a[hit], b[hit] = prev_s[hit], cur_s[hit]
            found |= hit
            if found.all():
                break
            prev_s, prev_g = cur_s, cur_g
        sel = np.flatnonzero(found)
        a, b = a[sel], b[sel]
        ids = idx[sel]
        # 0.2 mm brackets halve to ~5e-11 mm
        for _ in range(32):
            mid = 0.5 * (a + b)
            gm = g(mid, ids)
            up = gm > 0
            b = np.where(up, mid, b)
            a = np.where(up, a, mid)
        sol = 0.5 * (a + b)
        p = origin + sol[:, None] * rays[ids]
        inside = self.inside(p[:, 0], p[:, 1])
        depth[ids[inside]] = sol[inside]
        return depth.reshape(intr.shape)

    def truth_points(self, frame: int):
        s = self.spec
        half = s.extent / 2.0
        g = np.arange(-half, half + 1e-9, s.truth_spacing)
        x, y = np.meshgrid(g, g, indexing="xy")
        x, y = x.ravel(), y.ravel()
        z = self.height(x, y, frame)
        return np.stack([x, y, z], axis=1), self.surface_normals(x, y, frame)

    def render(self, frame: int) -> RenderedFrame:
        s = self.spec
        if not 0 <= frame < s.frames:
            raise IndexError(f"frame {frame} outside [0, {s.frames})")
        intr = s.intrinsics
        R, T = self.pose(frame)
        clean = self.raycast(frame)
        valid = clean > 0
        if not valid.any():
            raise EmptyScanError(f"camera sees no surface at frame {frame}")
        rng = np.random.default_rng([s.seed, frame, 1])
        depth = clean.copy()
        if s.noise > 0:
            depth[valid] += rng.normal(0.0, s.noise, int(valid.sum()))
            depth[valid] = np.maximum(depth[valid], 1e-3)
        # colour from material coordinates of the hit points
        world = (intr.pixel_rays() * clean[..., None]).reshape(-1, 3) - T
        world = world @ R
        color = np.where(valid.reshape(-1, 1), self.color(world[:, 0], world[:, 1]), 0.0).reshape(intr.shape + (3,))

        zeros = np.zeros(intr.shape + (3,))
        scan = DepthScan(depth, intr, color=color, normals=zeros, frame_index=frame)
        scan.normals = normals_from_depth(scan, s.normal_smoothing)
        clean_scan = DepthScan(clean, intr, color=color, normals=zeros.copy(), frame_index=frame)
        clean_scan.normals = normals_from_depth(clean_scan)

        prior = self._prior(frame, rng)
        corrs = self._correspondences(frame)
        pts, nrm = self.truth_points(frame)
        truth = GroundTruth(frame, R, T, pts, nrm, corrs, clean_scan)
        return RenderedFrame(scan, prior, corrs, truth)

    def _prior(self, frame: int, rng) -> PosePrior:
        s = self.spec
        R, T = self.pose(frame)
        if frame > 0 and (s.prior_rotation_noise > 0 or s.prior_translation_noise > 0):
            axis = rng.normal(size=3)
            dR = rotation_matrix(axis, math.radians(rng.normal(0.0, s.prior_rotation_noise)))
            R = dR @ R
            T = T + rng.normal(0.0, s.prior_translation_noise, 3)
        return PosePrior(R, T, frame)

    def _correspondences(self, frame: int) -> list[FeatureCorrespondence]:
        s = self.spec
        if frame == 0 or s.correspondences <= 0:
            return []
        rng = np.random.default_rng([s.seed, frame, 2])
        half = s.extent / 2.0
        xy = rng.uniform(-half, half, (4 * s.correspondences, 2))
        out = []
        prev_R, prev_T = self.pose(frame - 1)
        R, T = self.pose(frame)
        intr = s.intrinsics
        p0 = np.column_stack([xy, self.height(xy[:, 0], xy[:, 1], frame - 1)]) @ prev_R.T + prev_T
        p1 = np.column_stack([xy, self.height(xy[:, 0], xy[:, 1], frame)]) @ R.T + T
        _, _, _, ok0 = project_points(p0, intr)
        _, _, _, ok1 = project_points(p1, intr)
        keep = np.flatnonzero(ok0 & ok1)[: s.correspondences]
        if s.correspondence_noise > 0:
            p0 = p0 + rng.normal(0.0, s.correspondence_noise, p0.shape)
            p1 = p1 + rng.normal(0.0, s.correspondence_noise, p1.shape)
        for i in keep:
            out.append(FeatureCorrespondence(p0[i], p1[i], int(i)))
        return out


def _limit_steps(values: np.ndarray, max_step: float) -> np.ndarray:
    """Rescale a trajectory so no per-frame step (Euclidean) exceeds ``max_step``."""
    if len(values) < 2:
        return values
    steps = np.linalg.norm(np.diff(values, axis=0), axis=1).max()
    if steps > max_step:
        values = values * (max_step / steps)
    return values


def render_frame(spec: SceneSpec, frame: int, scene: Scene | None = None) -> RenderedFrame:
    return (scene or Scene(spec)).render(frame)


# --------------------------------------------------------------------------- evaluation


@dataclass
class ErrorReport:
    mean_distance: float  # model point to nearest truth sample, mm
    mean_residual: float  # back-projection point-to-plane residual against the clean scan, mm
    rotation_error: float  # degrees
    translation_error: float  # camera centre distance, mm
    n_points: int
    n_residual: int

    def to_row(self) -> dict:
        return {
            "mean_distance": self.mean_distance,
            "mean_residual": self.mean_residual,
            "rotation_error": self.rotation_error,
            "translation_error": self.translation_error,
        }


def back_projection_residual(points_cam: np.ndarray, scan: DepthScan) -> np.ndarray:
    """Absolute point-to-plane distance of camera-frame points to the scan pixel they hit."""
    _, rows, cols, ok = project_points(points_cam, scan.intrinsics)
    ok &= scan.valid[rows, cols]
    idx = np.flatnonzero(ok)
    q = scan.points[rows[idx], cols[idx]]
    n = scan.normals[rows[idx], cols[idx]]
    return np.abs(np.einsum("ij,ij->i", n, points_cam[idx] - q))


def evaluate(model, truth: GroundTruth, R=None, T=None) -> ErrorReport:
    """Compare a model (world frame) and an estimated pose with ground truth."""
    positions = model.positions if hasattr(model, "positions") else np.asarray(model, dtype=np.float64)
    positions = positions.reshape(-1, 3)
    if len(positions) == 0:
        raise ValueError("cannot evaluate an empty model")
    dist, _ = cKDTree(truth.points).query(positions)
    R_est = truth.R if R is None else np.asarray(R, dtype=np.float64)
    T_est = truth.T if T is None else np.asarray(T, dtype=np.float64)
    rel = R_est @ truth.R.T
    rot_err = math.degrees(math.acos(np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)))
    c_est = -R_est.T @ T_est
    c_true = -truth.R.T @ truth.T
    residual = np.zeros(0)
    if truth.clean_scan is not None:
        residual = back_projection_residual(positions @ R_est.T + T_est, truth.clean_scan)
    return ErrorReport(
        mean_distance=float(dist.mean()),
        mean_residual=float(residual.mean()) if residual.size else float("nan"),
        rotation_error=rot_err,
        translation_error=float(np.linalg.norm(c_est - c_true)),
        n_points=len(positions),
        n_residual=int(residual.size),
    )
