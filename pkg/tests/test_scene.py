import numpy as np
import pytest

from featmap import scene as sc
from featmap.geometry import CameraIntrinsics, Pose, corner_targets, project_point, project_points


@pytest.fixture(scope="module")
def small():
    return sc.build_datasets(sc.DatasetConfig(n_synth=100, n_real=20, seed=3))


def test_sample_pose_is_deterministic():
    assert sc.sample_pose(17).same_as(sc.sample_pose(17))
    assert not sc.sample_pose(17).same_as(sc.sample_pose(18))


def test_sample_pose_ranges():
    scene = sc.SceneConfig()
    K = scene.camera
    for i in range(10_000):
        pose = sc.sample_pose(i, scene)
        # camera looks down at the object: the world up axis points away from the camera
        view_dir = -pose.R[2]
        assert view_dir[2] >= -1e-12
        assert 2.0 <= pose.t[2] <= 3.5
        u, v = project_point(np.zeros(3), pose, K)
        assert 16 <= u <= 48 and 16 <= v <= 48


def test_inplane_rotation_within_bounds():
    # roll recovered as the angle between the camera x axis and the horizontal plane
    for i in range(2000):
        R = sc.sample_pose(i).R
        forward = R[2]
        horizontal = np.cross(forward, [0, 0, 1.0])
        if np.linalg.norm(horizontal) < 1e-3:
            continue
        horizontal /= np.linalg.norm(horizontal)
        cos = np.clip(abs(R[0] @ horizontal), -1, 1)
        assert np.degrees(np.arccos(cos)) <= 45 + 1e-9


def test_render_is_deterministic_and_bounded():
    model = sc.ObjectModel()
    K = CameraIntrinsics()
    pose = sc.sample_pose(5)
    a = sc.render_clean(pose, model, K, 123)
    b = sc.render_clean(pose, model, K, 123)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (64, 64)
    assert a.min() >= 0 and a.max() <= 1


def test_visible_face_pixel_has_shaded_intensity():
    model = sc.ObjectModel()
    K = CameraIntrinsics()
    # looking straight down the -z face
    pose = Pose(np.eye(3), [0, 0, 2.5])
    img = sc.render_clean(pose, model, K, 7)
    bg = sc.render_background(7, sc.SYNTHETIC, 64, 64)
    shade = sc.face_intensities(pose, model)
    u, v = project_point([0.05, 0.03, -0.15], pose, K)
    px = img[int(v), int(u)]
    assert px in shade
    assert px != bg[int(v), int(u)]


def test_far_pose_has_smaller_footprint():
    model = sc.ObjectModel()
    K = CameraIntrinsics()
    R = sc.sample_pose(9).R

    def area(z):
        uv = project_points(model.corners.points, Pose(R, [0, 0, z]), K)
        return np.ptp(uv[:, 0]) * np.ptp(uv[:, 1])

    assert area(3.5) < area(2.0)


def test_near_plane_raises():
    with pytest.raises(sc.ProjectionError):
        sc.render_clean(Pose(np.eye(3), [0, 0, 0.12]), sc.ObjectModel(), CameraIntrinsics(), 0)


def test_identity_corruption_leaves_image_unchanged():
    img = sc.render_clean(sc.sample_pose(3), sc.ObjectModel(), CameraIntrinsics(), 4)
    out = sc.apply_domain_transform(img, sc.DomainParams.identity(), 11)
    np.testing.assert_array_equal(out, img)


def test_default_corruption_changes_image():
    img = sc.render_clean(sc.sample_pose(3), sc.ObjectModel(), CameraIntrinsics(), 4)
    out = sc.apply_domain_transform(img, sc.DomainParams(), 11)
    assert np.abs(out - img).mean() > 0.01
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out, sc.apply_domain_transform(img, sc.DomainParams(), 11))


def test_domain_params_validation():
    with pytest.raises(sc.ConfigError):
        sc.DomainParams(dropout=1.5)
    with pytest.raises(sc.ConfigError):
        sc.DomainParams(gamma=(1.2, 0.9))


def test_build_counts_and_pairing(small):
    assert (len(small.synth), len(small.real), len(small.paired_synth)) == (100, 20, 20)
    small.check_pairing()
    assert np.all(small.synth.domains == sc.SYNTHETIC)
    assert np.all(small.real.domains == sc.REAL)
    assert np.all(small.paired_synth.domains == sc.SYNTHETIC)
    for s in (small.synth, small.real, small.paired_synth):
        assert s.images.min() >= 0 and s.images.max() <= 1


def test_targets_match_poses(small):
    corners = small.object.corners
    for s in (small.synth, small.real):
        for i in range(len(s)):
            np.testing.assert_allclose(s.targets[i], corner_targets(s.pose(i), corners, small.camera),
                                       rtol=0, atol=1e-12)


def test_train_and_test_poses_are_disjoint(small):
    other = sc.build_datasets(sc.DatasetConfig(n_synth=100, n_real=20, seed=4))
    a = {p.tobytes() for p in np.concatenate([small.synth.poses, small.real.poses])}
    b = {p.tobytes() for p in np.concatenate([other.synth.poses, other.real.poses])}
    assert not a & b


def test_measurable_gap(small):
    gap = np.abs(small.real.images - small.paired_synth.images).mean()
    assert gap > 0
    again = sc.build_datasets(sc.DatasetConfig(n_synth=0, n_real=20, seed=3))
    assert np.abs(again.paired_synth.images - small.paired_synth.images).max() == 0


def test_build_is_deterministic(small):
    assert sc.build_datasets(sc.DatasetConfig(n_synth=100, n_real=20, seed=3)).equals(small)


def test_keypoint_mode_targets():
    t = sc.build_datasets(sc.DatasetConfig(n_synth=5, n_real=2, head_mode="keypoint3d24"))
    assert t.synth.targets.shape == (5, 24)
    pose = t.synth.pose(0)
    np.testing.assert_allclose(t.synth.targets[0].reshape(8, 3) * 2.75, pose.transform(t.object.corners.points),
                               atol=1e-12)


def test_io_round_trip(tmp_path, small):
    path = tmp_path / "d.bin"
    sc.write_dataset(path, small)
    assert path.read_bytes()[:8] == sc.MAGIC
    assert sc.read_dataset(path).equals(small)


def test_io_empty_real_set(tmp_path):
    t = sc.build_datasets(sc.DatasetConfig(n_synth=3, n_real=0))
    sc.write_dataset(tmp_path / "e.bin", t)
    back = sc.read_dataset(tmp_path / "e.bin")
    assert len(back.real) == 0 and len(back.paired_synth) == 0
    assert back.equals(t)


def test_io_truncated(tmp_path, small):
    path = tmp_path / "d.bin"
    sc.write_dataset(path, small)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(sc.DatasetFormatError, match="truncated"):
        sc.read_dataset(path)


def test_io_bad_magic_and_trailing_bytes(tmp_path, small):
    path = tmp_path / "d.bin"
    sc.write_dataset(path, small)
    data = path.read_bytes()
    path.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(sc.DatasetFormatError, match="magic"):
        sc.read_dataset(path)
    path.write_bytes(data + b"\0" * 7)
    with pytest.raises(sc.DatasetFormatError, match="shape mismatch"):
        sc.read_dataset(path)


def test_object_model_validation():
    with pytest.raises(sc.ConfigError):
        sc.ObjectModel(albedos=(0.1,) * 6)
    m = sc.ObjectModel()
    assert m.diameter == pytest.approx(np.linalg.norm([0.8, 0.5, 0.3]))
    pts = m.surface_points(4)
    assert pts.shape == (8 + 24, 3)
    assert np.all(np.abs(pts) <= np.asarray(m.half_extents) + 1e-12)


def test_substreams_are_independent_of_call_order():
    a = sc.substream("x", 1).random()
    sc.substream("y", 2).random()
    assert sc.substream("x", 1).random() == a
    assert sc.substream("x", 2).random() != a


def test_train_and_test_streams_are_disjoint():
    train = sc.build_datasets(sc.DatasetConfig(n_synth=20, n_real=5, seed=0))
    test = sc.build_datasets(sc.DatasetConfig(n_synth=20, n_real=5, seed=0, stream="test"))
    assert not {p.tobytes() for p in train.synth.poses} & {p.tobytes() for p in test.synth.poses}
    assert not set(train.real.seeds.tolist()) & set(test.real.seeds.tolist())
