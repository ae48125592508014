import math

import numpy as np
import pytest
from scipy.optimize import brentq

from deformfusion.geometry import rotation_matrix
from deformfusion.synth import EmptyScanError, Scene, SceneSpec, evaluate


def small_spec(**kw):
    base = dict(width=64, height=48, fx=60.0, fy=60.0, frames=4)
    base.update(kw)
    return SceneSpec(**base)


def test_plane_identity_depth_equals_distance():
    spec = small_spec(surface="plane", distance=42.0)
    frame = Scene(spec).render(0)
    np.testing.assert_allclose(frame.scan.depth, 42.0, atol=1e-9)
    valid = frame.scan.valid
    assert valid[1:-1, 1:-1].all()
    np.testing.assert_allclose(frame.scan.normals[valid][:, 2], -1.0, atol=1e-9)


def test_rendering_is_bit_identical():
    spec = small_spec(noise=0.2, trajectory="smooth", perturbation=1.0, correspondence_noise=0.3)
    a = Scene(spec).render(2)
    b = Scene(spec).render(2)
    assert np.array_equal(a.scan.depth, b.scan.depth)
    assert np.array_equal(a.scan.color, b.scan.color)
    assert np.array_equal(a.prior.R, b.prior.R)
    assert [c.previous.tolist() for c in a.correspondences] == [c.previous.tolist() for c in b.correspondences]


def test_static_scene_frames_identical():
    spec = small_spec(surface="sine", frequency=0.0)
    scene = Scene(spec)
    assert np.array_equal(scene.render(0).scan.depth, scene.render(1).scan.depth)


def test_seed_changes_noise():
    a = Scene(small_spec(noise=0.1, seed=1)).render(0).scan.depth
    b = Scene(small_spec(noise=0.1, seed=2)).render(0).scan.depth
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("frame", [0, 3])
def test_sine_depth_matches_root_finding(frame):
    spec = small_spec(surface="sine", trajectory="smooth", frequency=0.1)
    scene = Scene(spec)
    depth = scene.raycast(frame)
    R, T = scene.pose(frame)
    origin = -R.T @ T
    intr = spec.intrinsics
    rng = np.random.default_rng(0)
    for _ in range(25):
        r, c = rng.integers(0, intr.height), rng.integers(0, intr.width)
        ray_cam = np.array([(c - intr.cx) / intr.fx, (r - intr.cy) / intr.fy, 1.0])
        d = R.T @ ray_cam

        def f(s):
            p = origin + s * d
            return p[2] - scene.height(p[0], p[1], frame)

        s = brentq(f, 1.0, 200.0, xtol=1e-12)
        assert depth[r, c] == pytest.approx(s, abs=0.05)


def test_clean_scan_lifts_onto_surface():
    spec = small_spec(surface="sine", trajectory="smooth")
    scene = Scene(spec)
    rf = scene.render(2)
    R, T = scene.pose(2)
    pts = rf.truth.clean_scan.points[rf.truth.clean_scan.valid]
    world = (pts - T) @ R
    err = np.abs(world[:, 2] - scene.height(world[:, 0], world[:, 1], 2))
    assert err.max() < 0.05


def test_hemisphere_centre_depth():
    spec = small_spec(surface="hemisphere", dome_radius=20.0, frequency=0.0)
    depth = Scene(spec).raycast(0)
    intr = spec.intrinsics
    # the pixel ray through the principal point hits the dome apex
    assert depth[int(intr.cy), int(intr.cx)] == pytest.approx(30.0, abs=0.05)


def test_empty_scan_when_facing_away():
    away = (rotation_matrix([1, 0, 0], math.pi), np.zeros(3))
    spec = small_spec(trajectory="explicit", poses=[away] * 4)
    with pytest.raises(EmptyScanError):
        Scene(spec).render(0)


def test_frame_out_of_range():
    with pytest.raises(IndexError):
        Scene(small_spec(frames=2)).render(2)


def test_correspondences_consistent_with_truth():
    spec = small_spec(trajectory="smooth", correspondences=15)
    scene = Scene(spec)
    assert scene.render(0).correspondences == []
    rf = scene.render(2)
    assert 0 < len(rf.correspondences) <= 15
    R0, T0 = scene.pose(1)
    R1, T1 = scene.pose(2)
    for c in rf.correspondences:
        w0 = R0.T @ (c.previous - T0)
        w1 = R1.T @ (c.current - T1)
        # material points share (x, y) and lie on the surface
        assert w0[:2] == pytest.approx(w1[:2], abs=1e-9)
        assert w0[2] == pytest.approx(scene.height(w0[0], w0[1], 1), abs=1e-9)
        assert w1[2] == pytest.approx(scene.height(w1[0], w1[1], 2), abs=1e-9)


def test_perturbation_magnitude():
    spec = small_spec(surface="plane", perturbation=2.0, perturbation_radius=5.0, frames=6)
    scene = Scene(spec)
    assert np.array_equal(scene.height(0.0, 0.0, 0), 50.0)
    for f in range(1, 6):
        cx, cy, mag, rad = scene._bumps[f]
        assert 1.6 <= abs(mag) <= 2.4 and rad == 5.0
        step = scene.height(cx, cy, f) - scene.height(cx, cy, f - 1)
        assert step == pytest.approx(mag, abs=1e-9)


def test_smooth_trajectory_step_bounds():
    spec = small_spec(trajectory="smooth", frames=30, max_translation=1.0, max_rotation=0.5)
    scene = Scene(spec)
    for f in range(1, 30):
        (R0, T0), (R1, T1) = scene.pose(f - 1), scene.pose(f)
        assert np.linalg.norm(R1.T @ T1 - R0.T @ T0) <= 1.0 + 1e-9
        ang = math.degrees(math.acos(np.clip((np.trace(R1 @ R0.T) - 1) / 2, -1, 1)))
        assert ang <= 0.5 * math.sqrt(3) + 1e-6


def test_prior_noise_only_after_frame_zero():
    spec = small_spec(trajectory="smooth", prior_translation_noise=0.5, prior_rotation_noise=0.5)
    scene = Scene(spec)
    p0 = scene.render(0).prior
    R0, T0 = scene.pose(0)
    assert np.array_equal(p0.R, R0) and np.array_equal(p0.T, T0)
    p2 = scene.render(2).prior
    assert not np.allclose(p2.T, scene.pose(2)[1])


def test_spec_kv_round_trip():
    spec = small_spec(surface="hemisphere", noise=0.25, cx=30.0, trajectory="fast")
    again = SceneSpec.from_kv(spec.to_kv())
    assert again == spec


@pytest.mark.parametrize(
    "kw",
    [
        dict(surface="torus"),
        dict(trajectory="spiral"),
        dict(noise=-1.0),
        dict(frames=0),
        dict(trajectory="explicit"),
        dict(surface="mesh"),
    ],
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        small_spec(**kw)


def test_spec_unknown_key():
    with pytest.raises(ValueError):
        SceneSpec.from_kv({"colour": "red"})


def test_mesh_surface(tmp_path):
    g = np.linspace(-70, 70, 15)
    x, y = np.meshgrid(g, g)
    z = 100.0 + 0.02 * x  # tilted relief, median removed by the loader
    verts = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    lines = ["ply", "format ascii 1.0", f"element vertex {len(verts)}", "property float x", "property float y",
             "property float z", "element face 0", "property list uchar int vertex_indices", "end_header"]
    lines += [" ".join(f"{v:.6f}" for v in row) for row in verts]
    path = tmp_path / "organ.ply"
    path.write_text("\n".join(lines) + "\n")
    spec = small_spec(surface="mesh", mesh_path=str(path), amplitude=0.0)
    scene = Scene(spec)
    assert scene.height(10.0, 5.0, 0) == pytest.approx(50.0 + 0.2, abs=1e-6)
    depth = scene.render(0).scan.depth
    assert depth[24, 32] == pytest.approx(50.0, abs=0.1)


def test_evaluate_self_is_zero():
    spec = small_spec(surface="sine")
    rf = Scene(spec).render(0)
    pts = rf.truth.clean_scan.points[rf.truth.clean_scan.valid]
    rep = evaluate(pts, rf.truth)
    assert rep.mean_residual < 1e-9
    assert rep.rotation_error == 0.0 and rep.translation_error == 0.0
    assert rep.n_residual == len(pts)


def test_evaluate_offset_plane():
    spec = small_spec(surface="plane", truth_spacing=0.05, extent=20.0)
    rf = Scene(spec).render(0)
    pts = rf.truth.clean_scan.points[rf.truth.clean_scan.valid]
    pts = pts + np.array([0.0, 0.0, 0.1])
    rep = evaluate(pts, rf.truth)
    assert rep.mean_distance == pytest.approx(0.1, rel=0.05)
    assert rep.mean_residual == pytest.approx(0.1, rel=1e-6)


def test_evaluate_pose_error():
    spec = small_spec(surface="plane")
    rf = Scene(spec).render(0)
    R = rotation_matrix([0, 0, 1], math.radians(2.0))
    rep = evaluate(rf.truth.points[:10], rf.truth, R=R, T=np.array([0.3, 0.4, 0.0]))
    assert rep.rotation_error == pytest.approx(2.0, abs=1e-9)
    assert rep.translation_error == pytest.approx(0.5, abs=1e-9)


def test_evaluate_empty_model():
    rf = Scene(small_spec(surface="plane")).render(0)
    with pytest.raises(ValueError):
        evaluate(np.zeros((0, 3)), rf.truth)
