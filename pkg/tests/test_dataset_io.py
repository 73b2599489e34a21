import numpy as np
import pytest

from fslam.dataset_io import (SyntheticScene, generate_synthetic, load_euroc, load_kitti, load_scene_config,
                              render_synthetic)
from fslam.errors import ConfigError, CountMismatch, MalformedCalibration, MissingFiles
from fslam.geometry import project_points
from fslam.imaging import write_image
from fslam.trajectory import read_trajectory, write_trajectory

P0 = "P0: 718.856 0 607.1928 0 0 718.857 185.2157 0 0 0 1 0"


def kitti_fixture(root, n=5, n_times=None, poses=True, calib=P0):
    seq = root / "sequences" / "00"
    (seq / "image_0").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        write_image(seq / "image_0" / f"{i:06d}.png", rng.integers(0, 256, (376, 1241), dtype=np.uint8))
    (seq / "times.txt").write_text("".join(f"{0.1 * i:.6e}\n" for i in range(n if n_times is None else n_times)))
    (seq / "calib.txt").write_text(calib + "\nP1: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    if poses:
        (root / "poses").mkdir()
        (root / "poses" / "00.txt").write_text("".join(f"1 0 0 {i} 0 1 0 0 0 0 1 {2 * i}\n" for i in range(n)))
    return root


def test_kitti_fixture(tmp_path):
    src = load_kitti(kitti_fixture(tmp_path), "00")
    assert len(src) == 5
    assert src.intrinsics.fx == 718.856 and src.intrinsics.cy == 185.2157
    assert (src.intrinsics.width, src.intrinsics.height) == (1241, 376)
    frames = list(src)
    assert [f.frame_id for f in frames] == list(range(5))
    assert frames[3].timestamp == pytest.approx(0.3) and frames[3].image.shape == (376, 1241)
    assert np.allclose(src.ground_truth.positions[4], [4, 0, 8])
    assert np.allclose(src.ground_truth.timestamps, src.timestamps)


def test_kitti_sequence_dir_directly(tmp_path):
    kitti_fixture(tmp_path, poses=False)
    src = load_kitti(tmp_path / "sequences" / "00")
    assert len(src) == 5 and src.ground_truth is None


def test_kitti_errors(tmp_path):
    with pytest.raises(CountMismatch):
        load_kitti(kitti_fixture(tmp_path / "a", n_times=4), "00")
    with pytest.raises(MalformedCalibration):
        load_kitti(kitti_fixture(tmp_path / "e", calib="P0: 700 0 5000 0 0 700 100 0 0 0 1 0"), "00")
    with pytest.raises(MalformedCalibration):
        load_kitti(kitti_fixture(tmp_path / "b", calib="P0: 1 2 3"), "00")
    with pytest.raises(MalformedCalibration):
        load_kitti(kitti_fixture(tmp_path / "c", calib="P2: 1 0 0 0 0 1 0 0 0 0 1 0"), "00")
    with pytest.raises(MissingFiles):
        load_kitti(tmp_path / "nothing")
    root = kitti_fixture(tmp_path / "d")
    (root / "sequences" / "00" / "times.txt").unlink()
    with pytest.raises(MissingFiles):
        load_kitti(root, "00")


SENSOR = """%YAML:1.0
sensor_type: camera
T_BS:
  cols: 4
  rows: 4
  data: [0.0, -1.0, 0.0, 0.1,
         1.0, 0.0, 0.0, 0.2,
         0.0, 0.0, 1.0, 0.0,
         0.0, 0.0, 0.0, 1.0]
rate_hz: 20
resolution: [752, 480]
camera_model: pinhole
intrinsics: [458.654, 457.296, 367.215, 248.375]
"""


EPOCH_STAMPS = [1403636579763555584, 1403636579813555456, 1403636579863555584]
SMALL_STAMPS = [1000000000, 1050000001, 1099999999]


def euroc_fixture(root, gt=True, stamps=EPOCH_STAMPS):
    cam = root / "mav0" / "cam0"
    (cam / "data").mkdir(parents=True)
    rows = ["#timestamp [ns],filename"]
    for s in stamps:
        write_image(cam / "data" / f"{s}.png", np.zeros((480, 752), np.uint8))
        rows.append(f"{s},{s}.png")
    (cam / "data.csv").write_text("\n".join(rows) + "\n")
    (cam / "sensor.yaml").write_text(SENSOR)
    if gt:
        g = root / "mav0" / "state_groundtruth_estimate0"
        g.mkdir(parents=True)
        c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
        g.joinpath("data.csv").write_text(
            "#timestamp,p_x,p_y,p_z,q_w,q_x,q_y,q_z,v_x,v_y,v_z\n"
            f"{stamps[0]},1.0,2.0,3.0,{c},{s},0.0,0.0,0,0,0\n")
    return root


def test_euroc_fixture(tmp_path):
    src = load_euroc(euroc_fixture(tmp_path, stamps=SMALL_STAMPS))
    assert len(src) == 3
    # hand-converted nanoseconds
    assert np.all(np.abs(src.timestamps - [1.0, 1.050000001, 1.099999999]) < 1e-9)
    assert src.intrinsics.fx == 458.654 and src.intrinsics.width == 752
    assert [f.frame_id for f in src] == [0, 1, 2]


def test_euroc_epoch_stamps_at_float_resolution(tmp_path):
    src = load_euroc(euroc_fixture(tmp_path))
    want = np.array([1403636579.763555584, 1403636579.813555456, 1403636579.863555584])
    # float64 spacing at 1.4e9 s is 2.4e-7 s; the conversion is correctly rounded
    assert np.all(np.abs(src.timestamps - want) <= np.spacing(want))
    assert src.intrinsics.fx == 458.654 and src.intrinsics.width == 752
    assert [f.frame_id for f in src] == [0, 1, 2]


def test_euroc_ground_truth_composed_with_extrinsic(tmp_path):
    src = load_euroc(euroc_fixture(tmp_path))
    gt = src.ground_truth
    assert len(gt) == 1
    # body rotated 90 deg about x; camera rotated 90 deg about z in the body frame
    R_wb = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], float)
    R_bs = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], float)
    R_wc = R_wb @ R_bs  # [[0,-1,0],[0,0,-1],[1,0,0]]
    c = np.array([1.0, 2.0, 3.0]) + R_wb @ np.array([0.1, 0.2, 0.0])  # (1.1, 2.0, 3.2)
    assert np.allclose(gt.positions[0], [1.1, 2.0, 3.2], atol=1e-12)
    assert np.allclose(gt.poses[0].R, R_wc.T, atol=1e-12)
    assert np.allclose(gt.positions[0], c)


def test_euroc_errors(tmp_path):
    with pytest.raises(MissingFiles):
        load_euroc(tmp_path)
    root = euroc_fixture(tmp_path / "a", gt=False)
    assert load_euroc(root).ground_truth is None
    (root / "mav0" / "cam0" / "sensor.yaml").write_text("intrinsics: [1, 2]\n")
    with pytest.raises(MalformedCalibration):
        load_euroc(root)
    root = euroc_fixture(tmp_path / "b", gt=False)
    next((root / "mav0" / "cam0" / "data").iterdir()).unlink()
    with pytest.raises(CountMismatch):
        load_euroc(root)


def test_ground_truth_round_trip(tmp_path):
    src = generate_synthetic(SyntheticScene(path="loop", n_frames=20))
    write_trajectory(src.ground_truth, tmp_path / "gt.txt")
    back = read_trajectory(tmp_path / "gt.txt")
    for a, b in zip(back.poses, src.ground_truth.poses):
        assert a.allclose(b, atol=1e-9)


# ---------------------------------------------------------------- synthetic

@pytest.mark.parametrize("path", ["line", "arc", "loop"])
def test_noiseless_observations_reproject_exactly(path):
    scene = SyntheticScene(path=path, n_frames=10, n_landmarks=300)
    src = generate_synthetic(scene, seed=3)
    X = src.world.landmarks
    for f in src:
        uv, _ = project_points(X[f.landmark_ids], src.ground_truth.poses[f.frame_id], src.intrinsics)
        assert len(f.landmark_ids) > 0
        assert np.abs(uv - f.keypoints.xy).max() < 1e-12


def test_noise_statistics():
    sigma = 1.5
    src = generate_synthetic(SyntheticScene(n_frames=5, sigma=sigma), seed=1)
    errs = []
    for f in src:
        uv, _ = project_points(src.world.landmarks[f.landmark_ids], src.ground_truth.poses[f.frame_id],
                               src.intrinsics)
        errs.append(f.keypoints.xy - uv)
    e = np.concatenate(errs)
    n = len(e)
    assert np.all(np.abs(e.mean(axis=0)) < 3 * sigma / np.sqrt(n))
    assert e.std() == pytest.approx(sigma, rel=0.1)


def test_outlier_rate():
    src = generate_synthetic(SyntheticScene(n_frames=3, outlier_rate=0.2), seed=0)
    for f in src:
        uv, _ = project_points(src.world.landmarks[f.landmark_ids], src.ground_truth.poses[f.frame_id],
                               src.intrinsics)
        bad = np.linalg.norm(uv - f.keypoints.xy, axis=1) > 1e-9
        assert bad.sum() == round(0.2 * len(f.landmark_ids))


def test_same_seed_is_bit_identical():
    scene = SyntheticScene(n_frames=5, sigma=0.5, outlier_rate=0.1, descriptor_regime="real")
    a, b = generate_synthetic(scene, 7), generate_synthetic(scene, 7)
    for fa, fb in zip(a, b):
        assert fa.keypoints.xy.tobytes() == fb.keypoints.xy.tobytes()
        assert fa.descriptors.data.tobytes() == fb.descriptors.data.tobytes()
        assert np.array_equal(fa.landmark_ids, fb.landmark_ids)
    c = generate_synthetic(scene, 8)
    assert c.frame(0).keypoints.xy.tobytes() != a.frame(0).keypoints.xy.tobytes()


def test_descriptor_regimes():
    idf = generate_synthetic(SyntheticScene(n_frames=2), 0)
    f0, f1 = idf.frame(0), idf.frame(1)
    shared = np.intersect1d(f0.landmark_ids, f1.landmark_ids)
    i0 = {l: i for i, l in enumerate(f0.landmark_ids)}
    i1 = {l: i for i, l in enumerate(f1.landmark_ids)}
    a = f0.descriptors[[i0[l] for l in shared]]
    b = f1.descriptors[[i1[l] for l in shared]]
    assert np.all(np.diag(a.distances(b)) == 0)
    real = generate_synthetic(SyntheticScene(n_frames=2, descriptor_regime="real"), 0).frame(0).descriptors
    D = real.distances(real)
    np.fill_diagonal(D, np.inf)
    assert real.kind == "real" and D.min() > 0.5


def test_loop_revisits_start():
    src = generate_synthetic(SyntheticScene(path="loop", n_frames=100), seed=0)
    shared = np.intersect1d(src.frame(0).landmark_ids, src.frame(99).landmark_ids)
    assert len(shared) >= 50


def test_scene_validation_and_config(tmp_path):
    for bad in ({"path": "zigzag"}, {"sigma": -1}, {"outlier_rate": 1.0}, {"descriptor_regime": "x"},
                {"n_frames": 1}, {"nope": 1}):
        with pytest.raises(ConfigError):
            SyntheticScene.from_dict(bad)
    (tmp_path / "s.yaml").write_text("scene:\n  path: line\n  n_frames: 12\n  sigma: 0.5\n")
    s = load_scene_config(tmp_path / "s.yaml")
    assert (s.path, s.n_frames, s.sigma) == ("line", 12, 0.5)
    assert SyntheticScene.from_dict(s.to_dict()) == s


def test_rendered_frames_are_deterministic_images():
    scene = SyntheticScene(n_frames=3, n_landmarks=100)
    a, b = render_synthetic(scene, 0), render_synthetic(scene, 0)
    img = a.frame(1).image
    assert img.dtype == np.uint8 and img.shape == (480, 640) and img.std() > 1
    assert img.tobytes() == b.frame(1).image.tobytes()
    dark = render_synthetic(scene, 0, transform=lambda im: im // 2).frame(1).image
    assert np.array_equal(dark, img // 2)
