import numpy as np
import pytest

from deformfusion import io as dio
from deformfusion.fusion import PointModel
from deformfusion.geometry import rotation_matrix
from deformfusion.posefeed import FeatureCorrespondence, FrameEnvelope, PosePrior
from deformfusion.synth import Scene, SceneSpec


def test_kv_parse_comments_and_blanks():
    kv = dio.parse_kv("# header\n\na = 1  # trailing\n b=two words \n")
    assert kv == {"a": "1", "b": "two words"}
    assert dio.parse_kv(dio.format_kv(kv)) == kv


def test_kv_rejects_bare_line():
    with pytest.raises(dio.FormatError, match="line 2"):
        dio.parse_kv("a = 1\nnonsense\n")


def test_intrinsics_round_trip(tmp_path, small_intr):
    path = tmp_path / "intrinsics.cfg"
    dio.write_intrinsics(path, small_intr)
    assert dio.read_intrinsics(path) == small_intr


def test_intrinsics_missing_key(tmp_path):
    path = tmp_path / "intrinsics.cfg"
    path.write_text("fx = 1\nfy = 1\n")
    with pytest.raises(dio.FormatError, match="cx"):
        dio.read_intrinsics(path)


def test_raw_depth_round_trip(tmp_path):
    depth = np.random.default_rng(0).uniform(10, 90, (5, 7)).astype(np.float32).astype(np.float64)
    depth[0, 0] = 0.0
    dio.write_raw_depth(tmp_path / "d.depth", depth)
    assert np.array_equal(dio.read_raw_depth(tmp_path / "d.depth"), depth)


def test_raw_depth_size_mismatch(tmp_path):
    dio.write_raw_depth(tmp_path / "d.depth", np.ones((4, 4)))
    (tmp_path / "d.depth").write_bytes(b"\0" * 12)
    with pytest.raises(dio.FormatError, match="expected 16"):
        dio.read_raw_depth(tmp_path / "d.depth")


def test_pgm16_rounds_to_mm(tmp_path):
    depth = np.array([[0.0, 12.4], [300.6, np.nan]])
    dio.write_pgm16(tmp_path / "d.pgm", depth)
    assert np.array_equal(dio.read_pgm(tmp_path / "d.pgm"), [[0, 12], [301, 0]])


def test_ppm_round_trip(tmp_path):
    color = np.random.default_rng(1).integers(0, 256, (4, 6, 3)).astype(np.float64)
    dio.write_ppm(tmp_path / "c.ppm", color)
    assert np.array_equal(dio.read_ppm(tmp_path / "c.ppm"), color)


def test_pnm_header_with_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([1, 2, 3]))
    assert dio.read_ppm(tmp_path / "c.ppm").tolist() == [[[1, 2, 3]]]


def test_pnm_wrong_magic(tmp_path):
    dio.write_pgm16(tmp_path / "d.pgm", np.ones((2, 2)))
    with pytest.raises(dio.FormatError, match="P6"):
        dio.read_ppm(tmp_path / "d.pgm")


def test_pose_round_trip(tmp_path):
    prior = PosePrior(rotation_matrix([1, 2, 3], 0.4), np.array([1.5, -2.0, 0.25]), 3)
    dio.write_pose(tmp_path / "p.pose", prior)
    back = dio.read_pose(tmp_path / "p.pose", 3)
    assert np.array_equal(back.R, prior.R) and np.array_equal(back.T, prior.T)


def test_pose_wrong_count(tmp_path):
    (tmp_path / "p.pose").write_text("1 2 3\n")
    with pytest.raises(dio.FormatError):
        dio.read_pose(tmp_path / "p.pose")


def test_correspondences_round_trip(tmp_path):
    corrs = [FeatureCorrespondence(np.array([1.0, 2, 3]), np.array([4.0, 5, 6.125]), 7)]
    dio.write_correspondences(tmp_path / "c.corr", corrs)
    back = dio.read_correspondences(tmp_path / "c.corr")
    assert back[0].feature_id == 7
    assert np.array_equal(back[0].current, corrs[0].current)


def test_correspondences_bad_line(tmp_path):
    (tmp_path / "c.corr").write_text("# comment\n1 2 3\n")
    with pytest.raises(dio.FormatError, match=":2:"):
        dio.read_correspondences(tmp_path / "c.corr")


def test_envelope_round_trip(tmp_path):
    spec = SceneSpec(width=32, height=24, fx=30.0, fy=30.0, frames=3, trajectory="smooth", noise=0.1)
    scene = Scene(spec)
    for i in range(3):
        rf = scene.render(i)
        dio.write_envelope(tmp_path, FrameEnvelope(rf.scan, rf.prior, rf.correspondences))
    assert dio.list_frames(tmp_path) == [0, 1, 2]
    rf = scene.render(2)
    env = dio.read_envelope(tmp_path, 2)
    assert env.frame_index == 2
    np.testing.assert_allclose(env.scan.depth, rf.scan.depth, atol=1e-5)  # float32 storage
    assert np.array_equal(env.prior.R, rf.prior.R)
    assert len(env.correspondences) == len(rf.correspondences)
    assert env.scan.intrinsics == spec.intrinsics


def test_envelope_pgm_fallback_and_missing(tmp_path, small_intr):
    dio.write_intrinsics(tmp_path / "intrinsics.cfg", small_intr)
    dio.write_pgm16(tmp_path / "frame_000004.pgm", np.full(small_intr.shape, 50.0))
    assert dio.list_frames(tmp_path) == [4]
    env = dio.read_envelope(tmp_path, 4)
    assert env.prior is None and env.correspondences == []
    assert np.all(env.scan.depth == 50.0)
    with pytest.raises(dio.FormatError):
        dio.read_envelope(tmp_path, 5)


def _model(n=5, seed=0):
    rng = np.random.default_rng(seed)
    return PointModel(
        rng.normal(size=(n, 3)).round(6),
        rng.normal(size=(n, 3)).round(6),
        rng.integers(0, 256, (n, 3)),
        rng.uniform(1, 10, n).round(6),
        rng.integers(0, 100, n),
        rng.integers(0, 2, n).astype(bool),
    )


def test_ply_round_trip(tmp_path):
    m = _model()
    dio.write_ply(tmp_path / "m.ply", m)
    back = dio.read_ply(tmp_path / "m.ply")
    for name in ("positions", "normals", "colors", "weights", "stamps", "stable"):
        np.testing.assert_allclose(getattr(back, name), getattr(m, name), atol=1e-6)
    assert dio.format_ply(back) == dio.format_ply(m)


def test_ply_empty_model():
    back = dio.parse_ply(dio.format_ply(PointModel.empty()))
    assert len(back) == 0


@pytest.mark.parametrize(
    "text",
    [
        "obj\n",
        "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n",
        "ply\nformat ascii 1.0\nend_header\n",
        "ply\nformat ascii 1.0\nelement vertex 0\nelement face 3\nend_header\n",
    ],
)
def test_ply_rejects(text):
    with pytest.raises(dio.FormatError):
        dio.parse_ply(text)


def test_surface_points_reads_xyz(tmp_path):
    text = (
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float z\nproperty float x\nproperty float y\n"
        "element face 1\nproperty list uchar int vertex_indices\nend_header\n3 1 2\n6 4 5\n3 0 1 1\n"
    )
    (tmp_path / "m.ply").write_text(text)
    assert dio.read_surface_points(tmp_path / "m.ply").tolist() == [[1, 2, 3], [4, 5, 6]]

