"""Six-term registration energy: residual vectors and analytic sparse Jacobians.

Parameter layout (``12 m + 6`` columns): for node j, columns ``12 j .. 12 j + 8``
hold the columns of ``A_j`` (column-major) and ``12 j + 9 .. 12 j + 11`` hold
``t_j``; the last six columns are a left rotation increment on ``R`` followed
by ``T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import DepthScan, project_points
from .warpfield import Skinning, WarpField, blend, compute_skinning, warp_normal

TERMS = ("rot", "reg", "data", "corr", "r", "p")
GIMBAL_TOL = 1e-6


@dataclass
class EnergyParams:
    w_rot: float = 1000.0
    w_reg: float = 10000.0
    w_data: float = 1.0
    w_corr: float = 10.0
    w_r: float = 1e6
    w_p: float = 1000.0
    eps_d: float = 15.0  # mm
    eps_n: float = 10.0  # degrees
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("w_rot", "w_reg", "w_data", "w_corr", "w_r", "w_p", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.eps_d <= 0:
            raise ValueError("eps_d must be positive")
        if not 0 < self.eps_n < 90:
            raise ValueError("eps_n must lie in (0, 90) degrees")

    def weight(self, term: str) -> float:
        return getattr(self, f"w_{term}")


@dataclass
class Block:
    """Residuals of one term with its Jacobian in COO triplets (rows local to the block)."""

    r: np.ndarray
    rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    vals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flags: tuple[str, ...] = ()

    @property
    def energy(self) -> float:
        return float(self.r @ self.r)

    def jacobian(self, n_params: int) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(len(self.r), n_params))


@dataclass
class Visibility:
    """Visible model points and their fixed scan association for one evaluation."""

    indices: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    targets: np.ndarray  # back-projected scan samples, camera frame
    normals: np.ndarray  # scan normals at the hit pixels

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class FrameProblem:
    """Everything the energy needs for one frame, in model coordinates."""

    points: np.ndarray
    normals: np.ndarray
    skin: Skinning
    scan: DepthScan
    corr_src: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    corr_dst: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    corr_skin: Skinning | None = None
    prior: object | None = None  # anything with .R and .T

    def __post_init__(self):
        self.corr_src = np.asarray(self.corr_src, dtype=np.float64).reshape(-1, 3)
        self.corr_dst = np.asarray(self.corr_dst, dtype=np.float64).reshape(-1, 3)


@dataclass
class Residuals:
    r: np.ndarray
    J: sp.csr_matrix | None
    slices: dict[str, slice]
    energies: dict[str, float]  # unweighted term energies
    params: EnergyParams
    visibility: Visibility | None = None
    flags: tuple[str, ...] = ()
    raw: dict[str, np.ndarray] = field(default_factory=dict)  # unweighted residuals

    @property
    def total(self) -> float:
        return float(self.r @ self.r)

    def weighted(self) -> dict[str, float]:
        return {t: self.params.weight(t) * self.energies[t] for t in TERMS}


# --------------------------------------------------------------------------- rotation


def e_rot(field: WarpField, jacobian: bool = True) -> Block:
    """Six orthonormality residuals per node affine (column dot products)."""
    m = field.m
    c = field.A  # columns are c[:, :, i]
    c1, c2, c3 = c[:, :, 0], c[:, :, 1], c[:, :, 2]
    r = np.stack(
        [
            np.einsum("ij,ij->i", c1, c2),
            np.einsum("ij,ij->i", c1, c3),
            np.einsum("ij,ij->i", c2, c3),
            np.einsum("ij,ij->i", c1, c1) - 1.0,
            np.einsum("ij,ij->i", c2, c2) - 1.0,
            np.einsum("ij,ij->i", c3, c3) - 1.0,
        ],
        axis=1,
    ).ravel()
    if not jacobian:
        return Block(r)
    # (residual, column-a, column-b) pairs: d(ca.cb)/dca = cb, d/dcb = ca
    pairs = [(0, 0, 1), (1, 0, 2), (2, 1, 2), (3, 0, 0), (4, 1, 1), (5, 2, 2)]
    rows, cols, vals = [], [], []
    base_row = np.arange(m) * 6
    base_col = np.arange(m) * 12
    for ri, a, b in pairs:
        for comp in range(3):
            if a == b:
                rows.append(base_row + ri)
                cols.append(base_col + 3 * a + comp)
                vals.append(2.0 * c[:, comp, a])
            else:
                rows.extend([base_row + ri, base_row + ri])
                cols.extend([base_col + 3 * a + comp, base_col + 3 * b + comp])
                vals.extend([c[:, comp, b], c[:, comp, a]])
    return Block(r, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def rot_energy(A) -> float:
    """Orthonormality error of a single 3x3 matrix."""
    A = np.asarray(A, dtype=np.float64)
    f = WarpField(g=np.zeros((1, 3)), A=A[None], t=np.zeros((1, 3)), neighbors=[[]])
    return e_rot(f, jacobian=False).energy


# --------------------------------------------------------------------------- regularisation


def e_reg(field: WarpField, alpha: float = 1.0, jacobian: bool = True) -> Block:
    edges = field.edges
    E = len(edges)
    if E == 0:
        return Block(np.zeros(0))
    j, k = edges[:, 0], edges[:, 1]
    s = math.sqrt(alpha)
    d = field.g[k] - field.g[j]
    r = s * (np.einsum("eab,eb->ea", field.A[j], d) + field.g[j] + field.t[j] - field.g[k] - field.t[k])
    r = r.ravel()
    if not jacobian:
        return Block(r)
    rows, cols, vals = [], [], []
    erow = np.arange(E) * 3
    for a in range(3):
        for cc in range(3):
            rows.append(erow + a)
            cols.append(12 * j + 3 * cc + a)
            vals.append(s * d[:, cc])
        rows.extend([erow + a, erow + a])
        cols.extend([12 * j + 9 + a, 12 * k + 9 + a])
        vals.extend([np.full(E, s), np.full(E, -s)])
    return Block(r, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


# --------------------------------------------------------------------------- warp jacobian


def _warp_jacobian(points: np.ndarray, skin: Skinning, field: WarpField, warped: np.ndarray):
    """Per-point 3 x (12 k) node block, its column ids, and the 3 x 6 global block."""
    n = len(points)
    ids = np.asarray(skin.node_ids).reshape(n, -1)
    w = np.asarray(skin.weights).reshape(n, -1)
    kk = ids.shape[1]
    d = points[:, None, :] - field.g[ids]  # (n, k, 3)
    coef = np.concatenate([w[..., None] * d, w[..., None]], axis=2)  # (n, k, 4)
    node_vals = np.einsum("nkc,ab->nakcb", coef, field.R).reshape(n, 3, kk * 12)
    node_cols = (12 * ids[:, :, None] + np.arange(12)[None, None, :]).reshape(n, kk * 12)
    p = warped - field.T
    glob = np.zeros((n, 3, 6))
    # d(exp(w) R u)/dw at w = 0 is -[R u]x
    glob[:, 0, 1], glob[:, 0, 2] = p[:, 2], -p[:, 1]
    glob[:, 1, 0], glob[:, 1, 2] = -p[:, 2], p[:, 0]
    glob[:, 2, 0], glob[:, 2, 1] = p[:, 1], -p[:, 0]
    glob[:, :, 3:] = np.eye(3)
    return node_vals, node_cols, glob


def _global_cols(field: WarpField) -> np.ndarray:
    return 12 * field.m + np.arange(6)


# --------------------------------------------------------------------------- data


def predict_visible(
    points: np.ndarray,
    normals: np.ndarray,
    skin: Skinning,
    field: WarpField,
    scan: DepthScan,
    params: EnergyParams,
) -> Visibility:
    """Model points whose warp lands near the scan surface with a compatible normal."""
    warped = field.R @ blend(points, skin, field).T
    warped = warped.T + field.T
    wn = warp_normal(normals, skin, field)
    return visible_from_warped(warped, wn, scan, params)


def visible_from_warped(warped: np.ndarray, warped_normals: np.ndarray, scan: DepthScan, params: EnergyParams):
    _, rows, cols, ok = project_points(warped, scan.intrinsics)
    ok &= scan.valid[rows, cols]
    targets = scan.points[rows, cols]
    snorm = scan.normals[rows, cols]
    dist = np.linalg.norm(warped - targets, axis=1)
    cos = np.einsum("ij,ij->i", warped_normals, snorm)
    ok &= dist < params.eps_d
    ok &= cos > math.cos(math.radians(params.eps_n))
    idx = np.flatnonzero(ok)
    return Visibility(idx, rows[idx], cols[idx], targets[idx], snorm[idx])


def e_data(points: np.ndarray, skin: Skinning, field: WarpField, vis: Visibility, jacobian: bool = True) -> Block:
    """Point-to-plane residuals of the visible points against their associated scan samples."""
    sel = vis.indices
    n = len(sel)
    if n == 0:
        return Block(np.zeros(0))
    pts = points[sel]
    sk = Skinning(np.asarray(skin.node_ids)[sel], np.asarray(skin.weights)[sel])
    warped = blend(pts, sk, field) @ field.R.T + field.T
    r = np.einsum("ij,ij->i", vis.normals, warped - vis.targets)
    if not jacobian:
        return Block(r)
    node_vals, node_cols, glob = _warp_jacobian(pts, sk, field, warped)
    nv = np.einsum("na,nac->nc", vis.normals, node_vals)
    gv = np.einsum("na,nac->nc", vis.normals, glob)
    width = nv.shape[1] + 6
    rows = np.repeat(np.arange(n), width)
    cols = np.concatenate([node_cols, np.broadcast_to(_global_cols(field), (n, 6))], axis=1).ravel()
    vals = np.concatenate([nv, gv], axis=1).ravel()
    return Block(r, rows, cols, vals)


# --------------------------------------------------------------------------- sparse correspondences


def e_corr(src: np.ndarray, dst: np.ndarray, field: WarpField, skin: Skinning | None = None, jacobian: bool = True) -> Block:
    """Residual ``warp(V_i) - target_i`` per correspondence (3 rows each)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    n = len(src)
    if n == 0:
        return Block(np.zeros(0))
    if skin is None:
        skin = compute_skinning(src, field)
    warped = blend(src, skin, field) @ field.R.T + field.T
    r = (warped - dst).ravel()
    if not jacobian:
        return Block(r)
    node_vals, node_cols, glob = _warp_jacobian(src, skin, field, warped)
    vals = np.concatenate([node_vals, glob], axis=2)  # (n, 3, width)
    width = vals.shape[2]
    cols = np.concatenate([node_cols, np.broadcast_to(_global_cols(field), (n, 6))], axis=1)
    rows = np.repeat(np.arange(3 * n), width)
    cols = np.repeat(cols, 3, axis=0).ravel()
    return Block(r, rows, cols, vals.reshape(3 * n, width).ravel())


# --------------------------------------------------------------------------- pose prior


def euler_zyx(M: np.ndarray) -> np.ndarray:
    """(yaw, pitch, roll) with ``M = Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    yaw = math.atan2(M[1, 0], M[0, 0])
    pitch = math.atan2(-M[2, 0], math.hypot(M[0, 0], M[1, 0]))
    roll = math.atan2(M[2, 1], M[2, 2])
    return np.array([yaw, pitch, roll])


def so3_log(M: np.ndarray) -> np.ndarray:
    c = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(c)
    v = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    if theta < 1e-9:
        return 0.5 * v
    if math.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        S = (M + np.eye(3)) / 2.0
        axis = S[:, np.argmax(np.diag(S))]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * v


def _euler_rate_inverse(euler: np.ndarray) -> np.ndarray:
    """d(euler)/d(omega) for a left (space-frame) rotation increment."""
    yaw, pitch, _ = euler
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp_ = math.cos(pitch), math.sin(pitch)
    E = np.array([[0.0, -sy, cy * cp], [0.0, cy, sy * cp], [1.0, 0.0, -sp_]])
    return np.linalg.inv(E)


def _log_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = np.array([[0.0, -phi[2], phi[1]], [phi[2], 0.0, -phi[0]], [-phi[1], phi[0], 0.0]])
    if theta < 1e-8:
        return np.eye(3) - 0.5 * K
    coef = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * K + coef * (K @ K)


def pose_residuals(field: WarpField, prior):
    """Unweighted rotation (Euler ZYX of ``R R_prior^T``) and translation residuals.

    Returns ``(r_rot, J_rot, r_trans, flags)``. Near gimbal lock the rotation
    residual falls back to the axis-angle of the relative rotation.
    """
    rel = field.R @ np.asarray(prior.R, dtype=np.float64).T
    eul = euler_zyx(rel)
    if abs(abs(eul[1]) - math.pi / 2) < GIMBAL_TOL:
        phi = so3_log(rel)
        return phi, _log_jacobian_inverse(phi), field.T - np.asarray(prior.T, dtype=np.float64), ("gimbal_fallback",)
    return eul, _euler_rate_inverse(eul), field.T - np.asarray(prior.T, dtype=np.float64), ()


def e_pose(field: WarpField, prior, params: EnergyParams, jacobian: bool = True) -> Block:
    """Pose-prior residuals, already scaled by sqrt(w_r) and sqrt(w_p)."""
    r_rot, J_rot, r_t, flags = pose_residuals(field, prior)
    sr, sp_ = math.sqrt(params.w_r), math.sqrt(params.w_p)
    r = np.concatenate([sr * r_rot, sp_ * r_t])
    if not jacobian:
        return Block(r, flags=flags)
    gc = _global_cols(field)
    rows = np.concatenate([np.repeat(np.arange(3), 3), np.arange(3, 6)])
    cols = np.concatenate([np.tile(gc[:3], 3), gc[3:]])
    vals = np.concatenate([sr * J_rot.ravel(), np.full(3, sp_)])
    return Block(r, rows, cols, vals, flags)


# --------------------------------------------------------------------------- assembly


def assemble(
    problem: FrameProblem,
    field: WarpField,
    params: EnergyParams,
    visibility: Visibility | None = None,
    jacobian: bool = True,
) -> Residuals:
    """Stack all six weighted terms; visibility is predicted at ``field`` unless given."""
    if visibility is None:
        visibility = predict_visible(problem.points, problem.normals, problem.skin, field, problem.scan, params)
    blocks: dict[str, Block] = {
        "rot": e_rot(field, jacobian),
        "reg": e_reg(field, params.alpha, jacobian),
        "data": e_data(problem.points, problem.skin, field, visibility, jacobian),
        "corr": e_corr(problem.corr_src, problem.corr_dst, field, problem.corr_skin, jacobian),
    }
    flags: tuple[str, ...] = ()
    if problem.prior is not None:
        r_rot, J_rot, r_t, flags = pose_residuals(field, problem.prior)
        gc = _global_cols(field)
        blocks["r"] = Block(r_rot, np.repeat(np.arange(3), 3), np.tile(gc[:3], 3), J_rot.ravel())
        blocks["p"] = Block(r_t, np.arange(3), gc[3:], np.ones(3))
    else:
        blocks["r"] = Block(np.zeros(0))
        blocks["p"] = Block(np.zeros(0))

    n_params = field.n_params
    slices, rs, Js = {}, [], []
    offset = 0
    energies = {}
    for name in TERMS:
        b = blocks[name]
        s = math.sqrt(params.weight(name))
        slices[name] = slice(offset, offset + len(b.r))
        offset += len(b.r)
        energies[name] = b.energy
        rs.append(s * b.r)
        if jacobian:
            Js.append(sp.csr_matrix((s * b.vals, (b.rows, b.cols)), shape=(len(b.r), n_params)))
    J = sp.vstack(Js, format="csr") if jacobian else None
    raw = {name: blocks[name].r for name in TERMS}
    return Residuals(np.concatenate(rs), J, slices, energies, params, visibility, flags, raw)


def data_residual_stats(res: Residuals) -> tuple[float, int]:
    """Mean absolute point-to-plane residual (mm) and visible count."""
    r = res.raw["data"]
    if len(r) == 0:
        return float("nan"), 0
    return float(np.mean(np.abs(r))), len(r)
