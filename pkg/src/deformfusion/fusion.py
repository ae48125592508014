"""Weighted point model maintenance: projective registration, fusion and pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geometry import DepthScan, project_points
from .warpfield import Skinning, WarpField, compute_skinning, group_cells, warp_normal, warp_point


class ModelPoint(NamedTuple):
    v: np.ndarray
    weight: float
    color: np.ndarray
    stamp: int
    stable: bool
    normal: np.ndarray


@dataclass
class PointModel:
    """Struct-of-arrays point model in model (world) coordinates."""

    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    weights: np.ndarray
    stamps: np.ndarray
    stable: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(n, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(n)
        self.stamps = np.asarray(self.stamps, dtype=np.int64).reshape(n)
        self.stable = np.asarray(self.stable, dtype=bool).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> ModelPoint:
        return ModelPoint(
            self.positions[i].copy(),
            float(self.weights[i]),
            self.colors[i].copy(),
            int(self.stamps[i]),
            bool(self.stable[i]),
            self.normals[i].copy(),
        )

    @classmethod
    def empty(cls) -> "PointModel":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def concat(cls, *models: "PointModel") -> "PointModel":
        return cls(
            np.concatenate([m.positions for m in models]),
            np.concatenate([m.normals for m in models]),
            np.concatenate([m.colors for m in models]),
            np.concatenate([m.weights for m in models]),
            np.concatenate([m.stamps for m in models]),
            np.concatenate([m.stable for m in models]),
        )

    def subset(self, idx) -> "PointModel":
        return PointModel(
            self.positions[idx],
            self.normals[idx],
            self.colors[idx],
            self.weights[idx],
            self.stamps[idx],
            self.stable[idx],
        )

    def copy(self) -> "PointModel":
        return self.subset(slice(None))


@dataclass
class FusionParams:
    node_grid: float = 4.0  # mm, distance scale of the fusion weight
    depth_gate: float = 10.0  # mm, registration |dz| gate
    angle_gate: float = 10.0  # degrees, registration normal gate
    truncation: float = 40.0  # mm, fusion-weight truncation
    weight_max: float = 10.0
    time_threshold: int = 10  # frames
    weight_threshold: float = 3.0
    point_grid: float = 1.0  # mm, downsampling cell

    def __post_init__(self):
        for name in ("node_grid", "depth_gate", "angle_gate", "truncation", "time_threshold", "weight_threshold", "point_grid"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_max < 1:
            raise ValueError("weight_max must be >= 1")


@dataclass
class RegistrationMap:
    """Point <-> pixel association. ``point_pixel`` holds flat pixel ids (-1 = none)."""

    point_pixel: np.ndarray
    pixel_point: np.ndarray  # (H, W) point index or -1

    @property
    def registered(self) -> np.ndarray:
        return np.flatnonzero(self.point_pixel >= 0)

    def consistent(self) -> bool:
        reg = self.registered
        flat = self.pixel_point.ravel()
        if not np.all(flat[self.point_pixel[reg]] == reg):
            return False
        pix = np.flatnonzero(flat >= 0)
        return bool(np.all(self.point_pixel[flat[pix]] == pix))


@dataclass
class FusionStats:
    registered: int = 0
    spawned: int = 0
    valid_pixels: int = 0
    mean_tsdw: float = 0.0
    truncated: int = 0
    extra: dict = field(default_factory=dict)


def lift_scan(scan: DepthScan, R=None, T=None, frame: int = 0, mask=None) -> PointModel:
    """Back-project valid scan pixels into model coordinates as fresh, unstable points."""
    valid = scan.valid if mask is None else (scan.valid & mask)
    pts = scan.points[valid]
    nrm = scan.normals[valid]
    R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64)
    T = np.zeros(3) if T is None else np.asarray(T, dtype=np.float64)
    n = len(pts)
    return PointModel(
        (pts - T) @ R,
        nrm @ R,
        scan.color[valid],
        np.ones(n),
        np.full(n, frame),
        np.zeros(n, dtype=bool),
    )


def register_warped(
    warped: np.ndarray, warped_normals: np.ndarray, scan: DepthScan, params: FusionParams
) -> RegistrationMap:
    """Projective association of already-warped points (camera frame)."""
    n = len(warped)
    h, w = scan.depth.shape
    _, rows, cols, ok = project_points(warped, scan.intrinsics)
    ok &= scan.valid[rows, cols]
    dz = np.abs(warped[:, 2] - scan.depth[rows, cols])
    ok &= dz < params.depth_gate
    cos = np.einsum("ij,ij->i", warped_normals, scan.normals[rows, cols])
    ok &= cos > math.cos(math.radians(params.angle_gate))

    cand = np.flatnonzero(ok)
    pix = rows[cand] * w + cols[cand]
    # collisions: smallest |dz| wins, then lowest point index
    order = np.lexsort((cand, dz[cand], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = cand[order[first]]
    win_pix = pix_sorted[first]

    point_pixel = np.full(n, -1, dtype=np.int64)
    point_pixel[winners] = win_pix
    pixel_point = np.full(h * w, -1, dtype=np.int64)
    pixel_point[win_pix] = winners
    return RegistrationMap(point_pixel, pixel_point.reshape(h, w))


def warp_model(model: PointModel, field: WarpField, skin: Skinning | None = None):
    if skin is None:
        skin = compute_skinning(model.positions, field)
    return warp_point(model.positions, skin, field), warp_normal(model.normals, skin, field)


def register(
    model: PointModel, field: WarpField, scan: DepthScan, params: FusionParams, skin: Skinning | None = None
) -> RegistrationMap:
    warped, normals = warp_model(model, field, skin)
    return register_warped(warped.reshape(-1, 3), normals.reshape(-1, 3), scan, params)


def tsdw(d_min, dz, params: FusionParams):
    """Fusion weight from nearest-node distance, truncated by the depth difference.

    ``d_min / (0.5 * node_grid)`` when ``|dz| < truncation``, else 0.
    """
    d_min = np.asarray(d_min, dtype=np.float64)
    dz = np.asarray(dz, dtype=np.float64)
    w = np.where(np.abs(dz) < params.truncation, d_min / (0.5 * params.node_grid), 0.0)
    return w if w.ndim else float(w)


def point_tsdw(point: ModelPoint, field: WarpField, scan: DepthScan, params: FusionParams) -> float:
    """Fusion weight of one model point under the current warp."""
    skin = compute_skinning(point.v, field)
    warped = warp_point(point.v, skin, field)
    _, rows, cols, ok = project_points(warped[None], scan.intrinsics)
    if not ok[0] or scan.depth[rows[0], cols[0]] <= 0:
        return 0.0
    d_min = float(field.tree.query(point.v)[0])
    return tsdw(d_min, warped[2] - scan.depth[rows[0], cols[0]], params)


def fuse_frame(
    model: PointModel,
    field: WarpField,
    scan: DepthScan,
    reg: RegistrationMap,
    params: FusionParams,
    frame: int,
    skin: Skinning | None = None,
    warped=None,
) -> tuple[PointModel, FusionStats]:
    """Deform every point, fuse registered ones with their pixel, lift the rest of the scan.

    Registered points move along their viewing ray to the running weighted
    mean of model and scan depth; colour and normal are averaged with the same
    weights and the fusion weight grows by one up to ``weight_max``. Every
    valid pixel without a registered point becomes a new point.
    Returns the merged model in model coordinates (no filtering).
    """
    if warped is None:
        warped = warp_model(model, field, skin)
    vpos, vnrm = warped
    vpos = np.array(vpos, dtype=np.float64).reshape(-1, 3)
    vnrm = np.array(vnrm, dtype=np.float64).reshape(-1, 3)
    weights = model.weights.copy()
    colors = model.colors.copy()
    stamps = model.stamps.copy()
    h, w = scan.depth.shape
    stats = FusionStats(valid_pixels=int(scan.valid.sum()))

    idx = reg.registered
    if len(idx):
        flat = reg.point_pixel[idx]
        r, c = flat // w, flat % w
        d_obs = scan.depth[r, c]
        z = vpos[idx, 2]
        d_min = field.tree.query(model.positions[idx])[0]
        conf = tsdw(d_min, z - d_obs, params)
        stats.mean_tsdw = float(np.mean(conf))
        keep = np.abs(z - d_obs) < params.truncation
        stats.truncated = int((~keep).sum())
        idx, r, c, d_obs, z = idx[keep], r[keep], c[keep], d_obs[keep], z[keep]
        om = weights[idx]
        fused_z = (z * om + d_obs) / (om + 1.0)
        vpos[idx] *= (fused_z / z)[:, None]
        colors[idx] = (colors[idx] * om[:, None] + scan.color[r, c]) / (om[:, None] + 1.0)
        n_new = vnrm[idx] * om[:, None] + scan.normals[r, c]
        nn = np.linalg.norm(n_new, axis=1, keepdims=True)
        vnrm[idx] = np.where(nn > 1e-12, n_new / np.maximum(nn, 1e-12), scan.normals[r, c])
        weights[idx] = np.minimum(om + 1.0, params.weight_max)
        stamps[idx] = frame
    stats.registered = int(len(reg.registered))

    # back to model coordinates
    R, T = field.R, field.T
    group1 = PointModel((vpos - T) @ R, vnrm @ R, colors, weights, stamps, model.stable.copy())
    free = reg.pixel_point < 0
    group2 = lift_scan(scan, R, T, frame, mask=free)
    stats.spawned = len(group2)
    return PointModel.concat(group1, group2), stats


def downsample(model: PointModel, grid: float, weight_max: float) -> PointModel:
    """Merge points sharing a grid cell: weighted means, summed (capped) weight, latest stamp."""
    if len(model) == 0:
        return model.copy()
    cells = np.floor(model.positions / grid).astype(np.int64)
    uniq, inv = group_cells(cells)
    inv = inv.ravel()
    k = len(uniq)
    w = model.weights
    wsum = np.bincount(inv, weights=w, minlength=k)
    # zero-weight cells fall back to plain means
    eff = np.where(wsum[inv] > 0, w, 1.0)
    den = np.bincount(inv, weights=eff, minlength=k)

    def avg(a):
        return np.stack([np.bincount(inv, weights=eff * a[:, i], minlength=k) / den for i in range(a.shape[1])], axis=1)

    pos = avg(model.positions)
    col = avg(model.colors)
    nrm = avg(model.normals)
    nn = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.where(nn > 1e-12, nrm / np.maximum(nn, 1e-12), 0.0)
    stamps = np.full(k, np.iinfo(np.int64).min)
    np.maximum.at(stamps, inv, model.stamps)
    stable = np.zeros(k, dtype=bool)
    np.logical_or.at(stable, inv, model.stable)
    weights = np.minimum(wsum, weight_max)
    return PointModel(pos, nrm, col, weights, stamps, stable)


def filter_points(model: PointModel, frame: int, params: FusionParams) -> PointModel:
    """Downsample, drop stale low-weight points, and refresh stability flags."""
    ds = downsample(model, params.point_grid, params.weight_max)
    stale = ds.stamps < frame - params.time_threshold
    weak = ds.weights < params.weight_threshold
    out = ds.subset(~(stale & weak))
    out.stable = out.weights >= params.weight_threshold
    return out

