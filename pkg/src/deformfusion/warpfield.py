"""Embedded-deformation node graph and point/normal warping.

A warped point is

    R @ sum_j w_j * (A_j @ (v - g_j) + g_j + t_j) + T

with ``(R, T)`` the global camera pose and ``(g_j, A_j, t_j)`` per node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_K = 4
DEFAULT_GRID = 4.0


class DegenerateWarpError(ValueError):
    pass


@dataclass
class Skinning:
    """Blend weights of k nodes; arrays are (k,) for one point or (N, k) for a batch."""

    node_ids: np.ndarray
    weights: np.ndarray


@dataclass
class WarpField:
    g: np.ndarray  # (m, 3) node positions
    A: np.ndarray  # (m, 3, 3)
    t: np.ndarray  # (m, 3)
    neighbors: list[np.ndarray]
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))
    k: int = DEFAULT_K
    grid: float = DEFAULT_GRID
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64).reshape(-1, 3)
        m = len(self.g)
        if m < 1:
            raise ValueError("a warp field needs at least one node")
        self.A = np.asarray(self.A, dtype=np.float64).reshape(m, 3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(m, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        self.neighbors = [np.asarray(n, dtype=np.int64) for n in self.neighbors]

    @property
    def m(self) -> int:
        return len(self.g)

    @property
    def n_params(self) -> int:
        return 12 * self.m + 6

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.g)
        return self._tree

    @property
    def edges(self) -> np.ndarray:
        """Directed regularisation edges (j, k) for k in N(j), shape (E, 2)."""
        if not self.neighbors:
            return np.zeros((0, 2), dtype=np.int64)
        src = np.concatenate([np.full(len(n), j, dtype=np.int64) for j, n in enumerate(self.neighbors)])
        dst = np.concatenate(self.neighbors) if src.size else np.zeros(0, dtype=np.int64)
        return np.stack([src, dst], axis=1)

    def copy(self) -> "WarpField":
        return WarpField(
            g=self.g.copy(),
            A=self.A.copy(),
            t=self.t.copy(),
            neighbors=[n.copy() for n in self.neighbors],
            R=self.R.copy(),
            T=self.T.copy(),
            k=self.k,
            grid=self.grid,
            _tree=self._tree,
        )

    def with_pose(self, R, T) -> "WarpField":
        out = self.copy()
        out.R = np.asarray(R, dtype=np.float64).copy()
        out.T = np.asarray(T, dtype=np.float64).copy()
        return out

    # parameter vector layout: per node [A column-major (9), t (3)], then [rotation increment (3), T (3)]
    def node_vector(self) -> np.ndarray:
        cols = np.transpose(self.A, (0, 2, 1)).reshape(self.m, 9)
        return np.concatenate([cols, self.t], axis=1).ravel()

    def retract(self, delta: np.ndarray) -> "WarpField":
        """Apply an increment: additive on node parameters, left-multiplied exp on R."""
        delta = np.asarray(delta, dtype=np.float64)
        m = self.m
        node = delta[: 12 * m].reshape(m, 12)
        out = self.copy()
        out.A = self.A + np.transpose(node[:, :9].reshape(m, 3, 3), (0, 2, 1))
        out.t = self.t + node[:, 9:]
        out.R = orthonormalize(so3_exp(delta[12 * m : 12 * m + 3]) @ self.R)
        out.T = self.T + delta[12 * m + 3 :]
        return out


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * (K @ K)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def grid_cells(points: np.ndarray, grid: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / grid).astype(np.int64)


def group_cells(cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Like ``np.unique(cells, axis=0, return_inverse=True)`` but via a scalar key (same lexicographic order)."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if len(cells) == 0:
        return cells.copy(), np.zeros(0, dtype=np.int64)
    lo = cells.min(axis=0)
    span = cells.max(axis=0) - lo + 1
    if float(span[0]) * float(span[1]) * float(span[2]) >= 2**62:
        uniq, inv = np.unique(cells, axis=0, return_inverse=True)
        return uniq, inv.ravel()
    c = cells - lo
    key = (c[:, 0] * span[1] + c[:, 1]) * span[2] + c[:, 2]
    ukey, inv = np.unique(key, return_inverse=True)
    uniq = np.stack([ukey // (span[1] * span[2]), (ukey // span[2]) % span[1], ukey % span[2]], axis=1) + lo
    return uniq, inv.ravel()


def build_node_graph(
    points, grid: float = DEFAULT_GRID, neighbor_count: int = DEFAULT_K, k: int = DEFAULT_K, R=None, T=None
) -> WarpField:
    """Place one node at the centroid of every occupied grid cell.

    Nodes are ordered by cell index (lexicographic), so the result depends only
    on the input point set. Each node's neighbours are its ``neighbor_count``
    nearest other nodes; ties go to the lower index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot build a node graph from an empty point set")
    if grid <= 0:
        raise ValueError("grid size must be positive")
    cells = grid_cells(points, grid)
    uniq, inverse = group_cells(cells)
    inverse = inverse.ravel()
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    g = np.zeros((len(uniq), 3))
    for c in range(3):
        g[:, c] = np.bincount(inverse, weights=points[:, c], minlength=len(uniq)) / counts
    m = len(g)
    neighbors = nearest_others(g, neighbor_count)
    return WarpField(
        g=g,
        A=np.tile(np.eye(3), (m, 1, 1)),
        t=np.zeros((m, 3)),
        neighbors=neighbors,
        R=np.eye(3) if R is None else R,
        T=np.zeros(3) if T is None else T,
        k=k,
        grid=grid,
    )


def nearest_others(g: np.ndarray, count: int) -> list[np.ndarray]:
    m = len(g)
    q = min(count, m - 1)
    if q <= 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(m)]
    # query a few extra so exact-distance ties can be re-sorted by index
    extra = min(m, q + 1 + 4)
    dist, idx = cKDTree(g).query(g, k=extra)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    out = []
    for j in range(m):
        d, i = dist[j], idx[j]
        keep = i != j
        d, i = d[keep], i[keep]
        order = np.lexsort((i, d))
        out.append(i[order][:q].astype(np.int64))
    return out


def compute_skinning(v, field: WarpField, k: int | None = None) -> Skinning:
    """Blend weights ``1 - |v - g_j| / d_max`` over the k nearest nodes, normalised.

    ``d_max`` is the distance to the (k+1)-th nearest node. With fewer than
    k+1 nodes every node is used and ``d_max`` is 1.05 times the largest
    distance. When all distances are zero the weights are uniform.
    """
    k = field.k if k is None else k
    pts = np.asarray(v, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    m = field.m

    if m >= k + 1:
        dist, idx = field.tree.query(pts, k=k + 1)
        dist = dist.reshape(len(pts), k + 1)
        idx = idx.reshape(len(pts), k + 1)
        # deterministic tie-break on index
        order = _sort_ties(dist, idx)
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        d_max = dist[:, k]
        dist, idx = dist[:, :k], idx[:, :k]
    else:
        dist = np.linalg.norm(pts[:, None, :] - field.g[None, :, :], axis=-1)
        order = _sort_ties(dist, np.broadcast_to(np.arange(m), dist.shape))
        dist = np.take_along_axis(dist, order, axis=1)
        idx = order
        d_max = 1.05 * dist[:, -1]

    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.clip(1.0 - dist / d_max[:, None], 0.0, None)
    degenerate = ~(d_max > 0)
    raw[degenerate] = 1.0
    total = raw.sum(axis=1)
    # every raw weight may vanish when the k nearest nodes tie with the (k+1)-th
    flat = total <= 0
    raw[flat] = 1.0
    total[flat] = raw.shape[1]
    w = raw / total[:, None]
    idx = idx.astype(np.int64)
    if single:
        return Skinning(node_ids=idx[0], weights=w[0])
    return Skinning(node_ids=idx, weights=w)


def _sort_ties(dist: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Row-wise argsort by distance, then by node index."""
    n, c = dist.shape
    rows = np.repeat(np.arange(n), c)
    flat = np.lexsort((np.asarray(idx).ravel(), dist.ravel(), rows))
    return (flat - rows * c).reshape(n, c)


def _per_point(skin: Skinning, n: int):
    """Skinning ids and weights as (n, k) arrays; also valid for n == 0."""
    ids = np.asarray(skin.node_ids)
    k = ids.shape[-1] if ids.ndim else 1
    return ids.reshape(n, k), np.asarray(skin.weights).reshape(n, k)


def blend(v: np.ndarray, skin: Skinning, field: WarpField) -> np.ndarray:
    """Non-rigid part of the warp (before the global pose), vectorised over points."""
    pts = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    ids, w = _per_point(skin, len(pts))
    d = pts[:, None, :] - field.g[ids]  # (N, k, 3)
    # sum_j w_j [A_j d_j + g_j + t_j] rewritten as v + sum_j w_j [(A_j - I) d_j + t_j]
    # (weights sum to one), which is exact for the identity state
    offset = np.einsum("nkab,nkb->nka", field.A[ids] - np.eye(3), d) + field.t[ids]
    return pts + np.einsum("nk,nka->na", w, offset)


def warp_point(v, skin: Skinning, field: WarpField) -> np.ndarray:
    single = np.asarray(v).ndim == 1
    u = blend(v, skin, field)
    out = u @ field.R.T + field.T
    return out[0] if single else out


def warp_normal(n, skin: Skinning, field: WarpField) -> np.ndarray:
    """Warp unit normals with the blended inverse-transpose of the node affines."""
    single = np.asarray(n).ndim == 1
    nrm = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    ids, w = _per_point(skin, len(nrm))
    mats = inverse_transpose(field.A)
    blended = np.einsum("nk,nkab,nb->na", w, mats[ids], nrm)
    out = blended @ field.R.T
    norm = np.linalg.norm(out, axis=1)
    if single:
        if norm[0] < 1e-12:
            raise DegenerateWarpError("warped normal vanished")
        return out[0] / norm[0]
    # batch callers get zero normals for degenerate entries
    return np.where(norm[:, None] > 1e-12, out / np.maximum(norm, 1e-12)[:, None], 0.0)


def inverse_transpose(A: np.ndarray) -> np.ndarray:
    """Inverse-transpose of each affine; singular matrices are passed through."""
    A = np.asarray(A, dtype=np.float64)
    det = np.linalg.det(A)
    ok = np.abs(det) >= 1e-9
    out = A.copy()
    if ok.any():
        out[ok] = np.transpose(np.linalg.inv(A[ok]), (0, 2, 1))
    return out


def dump(field: WarpField) -> str:
    """Plain-text debug dump: pose, then one node per line (g, A row-major, t)."""
    lines = [f"nodes {field.m} k {field.k} grid {field.grid:.6f}"]
    lines.append("R " + " ".join(f"{x:.9f}" for x in field.R.ravel()))
    lines.append("T " + " ".join(f"{x:.9f}" for x in field.T))
    for j in range(field.m):
        vals = np.concatenate([field.g[j], field.A[j].ravel(), field.t[j]])
        nb = ",".join(str(int(x)) for x in field.neighbors[j])
        lines.append("node " + " ".join(f"{x:.9f}" for x in vals) + f" nb {nb}")
    return "\n".join(lines) + "\n"


def load_dump(text: str) -> WarpField:
    lines = [ln.split() for ln in text.strip().splitlines()]
    header = lines[0]
    k, grid = int(header[3]), float(header[5])
    R = np.array([float(x) for x in lines[1][1:]]).reshape(3, 3)
    T = np.array([float(x) for x in lines[2][1:]])
    g, A, t, nbs = [], [], [], []
    for ln in lines[3:]:
        vals = np.array([float(x) for x in ln[1:16]])
        g.append(vals[:3])
        A.append(vals[3:12].reshape(3, 3))
        t.append(vals[12:15])
        nb = ln[17] if len(ln) > 17 else ""
        nbs.append(np.array([int(x) for x in nb.split(",") if x], dtype=np.int64))
    return WarpField(g=np.array(g), A=np.array(A), t=np.array(t), neighbors=nbs, R=R, T=T, k=k, grid=grid)
