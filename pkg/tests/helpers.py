"""Small scene builders shared by the tests."""

import math
from types import SimpleNamespace

import numpy as np

from deformfusion.energy import FrameProblem
from deformfusion.geometry import CameraIntrinsics, DepthScan, rotation_matrix
from deformfusion.warpfield import build_node_graph, compute_skinning

FD_INTR = CameraIntrinsics(100.0, 100.0, 31.5, 31.5, 64, 64)


def plane_scan(intr: CameraIntrinsics, z: float = 50.0, frame: int = 0, slope=(0.0, 0.0)) -> DepthScan:
    """Scan of the plane ``z = z0 + a*x + b*y`` (camera frame), exact per pixel ray."""
    rays = intr.pixel_rays()
    a, b = slope
    depth = z / (1.0 - a * rays[..., 0] - b * rays[..., 1])
    return DepthScan(depth, intr, frame_index=frame)


def fd_instance(seed: int, gimbal: bool = False):
    """10 points, 4 nodes, 2 correspondences and a pose prior on a tilted plane."""
    rng = np.random.default_rng(seed)
    scan = plane_scan(FD_INTR, 50.0, slope=(0.02, 0.01))
    pts = rng.uniform([-8, -8, 49], [8, 8, 51], (10, 3))
    nrm = np.tile([0, 0, -1.0], (10, 1))
    f = build_node_graph(np.array([[-5, -5, 50], [5, -5, 50], [-5, 5, 50], [5, 5, 50.0]]), grid=10, neighbor_count=3, k=2)
    f.A = f.A + rng.normal(0, 0.01, f.A.shape)
    f.t = rng.normal(0, 0.3, f.t.shape)
    f.R = rotation_matrix(rng.normal(size=3), rng.normal(0, 0.03))
    f.T = rng.normal(0, 0.5, 3)
    src = rng.uniform([-5, -5, 48], [5, 5, 52], (2, 3))
    dst = src + rng.normal(0, 1, (2, 3))
    if gimbal:
        prior_R = rotation_matrix([0, 1, 0], math.pi / 2).T @ f.R
    else:
        prior_R = rotation_matrix(rng.normal(size=3), rng.normal(0, 0.1))
    prior = SimpleNamespace(R=prior_R, T=rng.normal(0, 1, 3))
    problem = FrameProblem(pts, nrm, compute_skinning(pts, f), scan, src, dst, compute_skinning(src, f), prior)
    return problem, f
