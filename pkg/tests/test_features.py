import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import cKDTree

from fslam.errors import ConfigTooDeep, MalformedRecord, MissingFrame, MixedDescriptorLength, VariantMismatch
from fslam.features import (Descriptors, FeatureFile, Keypoints, MatchThresholds, PyramidConfig, build_pyramid,
                            detect_and_describe, encode_feature_file, level_to_base, load_external_features, match,
                            match_in_windows, write_feature_file)


def blob_image(seed=0, n=50, size=(480, 640), sigma=2.0, margin=90):
    rng = np.random.default_rng(seed)
    h, w = size
    centers = []
    while len(centers) < n:
        c = rng.uniform([margin, margin], [w - margin, h - margin])
        if all(np.hypot(*(c - d)) > 36 for d in centers):
            centers.append(c)
    centers = np.array(centers)
    yy, xx = np.mgrid[:h, :w]
    img = np.full((h, w), 40.0)
    for cx, cy in centers:
        img += 200 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    return np.clip(img, 0, 255).astype(np.uint8), centers


def planted_real(rng, n=100, dim=64, sigma=0.01):
    """Unit vectors and noisy copies. Inlier distances sit far below th_low and
    far below the distance between distinct classes (about sqrt(2))."""
    a = rng.normal(size=(n, dim))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = a + rng.normal(scale=sigma, size=a.shape)
    perm = rng.permutation(n)
    return Descriptors.real(a), Descriptors.real(b[perm]), perm


# ---------------------------------------------------------------- config

def test_pyramid_config_validation():
    with pytest.raises(ValueError):
        PyramidConfig(1.0, 3)
    with pytest.raises(ValueError):
        PyramidConfig(2.0, 0)


def test_thresholds_validation_and_scaling():
    with pytest.raises(ValueError):
        MatchThresholds(2.0, 1.0)
    with pytest.raises(ValueError):
        MatchThresholds(1.0, 2.0, ratio=0.0)
    th = MatchThresholds.from_dimensionless(1, 2)
    assert (th.th_low, th.th_high) == pytest.approx((0.1, 0.2))
    assert th.gate("strict") == th.th_low and th.gate("relaxed") == th.th_high


# ---------------------------------------------------------------- pyramid

def test_pyramid_sizes():
    levels = build_pyramid(np.zeros((480, 640), np.uint8), PyramidConfig(2, 3))
    assert [lv.shape for lv in levels] == [(480, 640), (240, 320), (120, 160)]


def test_pyramid_non_integer_factor_floors():
    levels = build_pyramid(np.zeros((101, 99), np.uint8), PyramidConfig(np.sqrt(2), 3))
    assert [lv.shape for lv in levels] == [(101, 99), (71, 70), (50, 49)]


def test_pyramid_single_level_identity(rng):
    img = rng.integers(0, 256, (30, 40)).astype(np.uint8)
    (lv,) = build_pyramid(img, PyramidConfig(2, 1))
    assert np.array_equal(lv, img)


def test_pyramid_too_deep():
    with pytest.raises(ConfigTooDeep):
        build_pyramid(np.zeros((4, 4), np.uint8), PyramidConfig(2, 4))


def test_pyramid_area_average():
    img = np.array([[0, 4, 8, 8], [4, 8, 8, 8]], np.uint8)
    assert np.array_equal(build_pyramid(img, PyramidConfig(2, 2))[1], [[4, 8]])


# ---------------------------------------------------------------- detector

def test_flat_image_has_no_keypoints():
    kps, desc = detect_and_describe(np.full((120, 160), 128, np.uint8))
    assert len(kps) == 0 and len(desc) == 0


def test_blobs_are_detected_near_centres():
    img, centers = blob_image()
    kps, desc = detect_and_describe(img, PyramidConfig(2, 3), 1000)
    assert len(kps) >= 50 and len(desc) == len(kps)
    dist, idx = cKDTree(centers).query(kps.xy)
    assert dist.max() < 2.0
    assert len(set(idx)) == 50
    assert np.all(np.diff(kps.response) <= 0)
    assert kps.octave.max() < 3


def test_detection_is_deterministic():
    img, _ = blob_image(seed=3)
    k1, d1 = detect_and_describe(img)
    k2, d2 = detect_and_describe(img)
    assert np.array_equal(k1.xy, k2.xy) and np.array_equal(d1.data, d2.data)
    assert d1.kind == "binary" and d1.length == 256


def test_target_count_caps_output():
    img, _ = blob_image()
    kps, _ = detect_and_describe(img, target_count=20)
    assert len(kps) == 20


@pytest.mark.parametrize("octave", [0, 1, 2])
def test_level_coordinates_map_to_base(octave):
    """A blob at a known level-0 position is recovered through each level."""
    f = 2.0**octave
    img, centers = blob_image(n=12, sigma=2.0 * f, margin=100)
    kps, _ = detect_and_describe(img, PyramidConfig(2, 3), 1000)
    sel = kps.octave == octave
    assert sel.any()
    dist, _ = cKDTree(centers).query(kps.xy[sel])
    assert dist.min() <= 0.5 * f


def test_level_to_base_pixel_centres():
    assert np.allclose(level_to_base(np.array([[0.0, 0.0]]), 2.0), [[0.5, 0.5]])
    assert np.allclose(level_to_base(np.array([[3.0, 1.0]]), 1.0), [[3.0, 1.0]])


# ---------------------------------------------------------------- descriptors

def test_real_descriptors_are_normalized(rng):
    d = Descriptors.real(rng.normal(size=(5, 128)) * 7)
    assert np.allclose(np.linalg.norm(d.data, axis=1), 1, atol=1e-6)


def test_hamming_distance():
    a = Descriptors.binary(np.array([[0b1011, 0]], np.uint8), 16)
    b = Descriptors.binary(np.array([[0b0001, 255]], np.uint8), 16)
    assert a.distances(b)[0, 0] == 10


def test_variant_mismatch(rng):
    a = Descriptors.real(rng.normal(size=(3, 8)))
    b = Descriptors.binary(np.zeros((3, 1), np.uint8), 8)
    with pytest.raises(VariantMismatch):
        match(a, b, MatchThresholds(1, 2))
    with pytest.raises(VariantMismatch):
        match(a, Descriptors.real(rng.normal(size=(3, 16))), MatchThresholds(1, 2))


# ---------------------------------------------------------------- matching

def test_identical_sets_match_identity(rng):
    d = Descriptors.real(rng.normal(size=(40, 32)))
    m = match(d, d, MatchThresholds(0.1, 0.2))
    assert np.array_equal(m.idx_a, np.arange(40)) and np.array_equal(m.idx_b, np.arange(40))
    assert np.allclose(m.distance, 0, atol=1e-6)


def test_equidistant_neighbours_rejected_by_ratio():
    a = Descriptors.real(np.array([[1.0, 0.0, 0.0]]))
    b = Descriptors.real(np.array([[1.0, 0.1, 0.0], [1.0, -0.1, 0.0]]))
    assert len(match(a, b, MatchThresholds(0.5, 1.0, ratio=0.9), "relaxed")) == 0


def test_planted_correspondences(rng):
    a, b, perm = planted_real(rng)
    inlier = np.linalg.norm(a.data[perm] - b.data, axis=1).max()
    th = MatchThresholds(0.1, 0.2)
    assert inlier < th.th_low < np.sqrt(2) - 0.3
    m = match(a, b, th)
    correct = perm[m.idx_b] == m.idx_a
    assert correct.sum() >= 95 and (~correct).sum() == 0


def test_match_gates_by_mode(rng):
    a, b, _ = planted_real(rng, sigma=0.02)
    d = np.sort(match(a, b, MatchThresholds(1.0, 1.0)).distance)
    mid = float(np.median(d))
    th = MatchThresholds(mid, 1.0)
    assert len(match(a, b, th, "strict")) < len(match(a, b, th, "relaxed"))
    with pytest.raises(ValueError):
        match(a, b, th, "loose")


@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 40))
def test_match_properties(seed, na, nb):
    rng = np.random.default_rng(seed)
    a = Descriptors.binary(rng.integers(0, 256, (na, 4), dtype=np.uint8), 32)
    b = Descriptors.binary(rng.integers(0, 256, (nb, 4), dtype=np.uint8), 32)
    th = MatchThresholds(10, 14, ratio=0.95)
    strict = match(a, b, th, "strict")
    relaxed = match(a, b, th, "relaxed")
    # one-to-one
    for m in (strict, relaxed):
        assert len(set(m.idx_a)) == len(m) and len(set(m.idx_b)) == len(m)
    # symmetric under swap
    swapped = match(b, a, th, "relaxed")
    assert set(zip(relaxed.idx_a, relaxed.idx_b)) == set(zip(swapped.idx_b, swapped.idx_a))
    # strict subset of relaxed
    assert set(zip(strict.idx_a, strict.idx_b)) <= set(zip(relaxed.idx_a, relaxed.idx_b))


def test_match_in_windows_respects_radius(rng):
    a, b, perm = planted_real(rng, n=30)
    xy_a = rng.uniform(0, 100, (30, 2))
    xy_b = np.empty_like(xy_a)
    xy_b[np.arange(30)] = xy_a[perm] + 1.0
    m = match_in_windows(a, xy_a, b, xy_b, radius=3.0, gate=0.2)
    assert len(m) == 30 and np.all(perm[m.idx_b] == m.idx_a)
    assert len(match_in_windows(a, xy_a, b, xy_b + 50, radius=3.0, gate=0.2)) < 30


# ---------------------------------------------------------------- feature files

def _frame(rng, n, dim):
    kps = Keypoints.from_xy(rng.uniform(0, 100, (n, 2)))
    return kps, Descriptors.real(rng.normal(size=(n, dim)))


@pytest.mark.parametrize("version", [1, 2])
def test_feature_file_roundtrip(tmp_path, rng, version):
    frames = {0: _frame(rng, 2, 128), 7: _frame(rng, 5, 128)}
    path = tmp_path / "f.fslf"
    write_feature_file(path, frames, version)
    kps, desc = load_external_features(path, 0)
    assert len(kps) == 2 and desc.kind == "real" and desc.length == 128
    assert np.allclose(kps.xy, frames[0][0].xy, atol=1e-4)
    assert np.allclose(desc.data, frames[0][1].data)
    assert FeatureFile(path).frame_ids == [0, 7]


def test_feature_file_binary_roundtrip(tmp_path, rng):
    kps = Keypoints.from_xy(rng.uniform(0, 50, (4, 2)), octave=np.array([0, 1, 2, 1]))
    desc = Descriptors.binary(rng.integers(0, 256, (4, 32), dtype=np.uint8))
    write_feature_file(tmp_path / "b.fslf", {3: (kps, desc)})
    k2, d2 = load_external_features(tmp_path / "b.fslf", 3)
    assert np.array_equal(d2.data, desc.data) and np.array_equal(k2.octave, [0, 1, 2, 1])


def test_feature_file_missing_frame(tmp_path, rng):
    write_feature_file(tmp_path / "f.fslf", {0: _frame(rng, 2, 16)})
    with pytest.raises(MissingFrame):
        load_external_features(tmp_path / "f.fslf", 5)


def test_feature_file_mixed_lengths(tmp_path, rng):
    frames = {0: _frame(rng, 2, 128), 1: _frame(rng, 2, 64)}
    with pytest.raises(MixedDescriptorLength):
        encode_feature_file(frames, version=1)
    # a version-2 file carries per-frame lengths and is rejected on reading
    (tmp_path / "m.fslf").write_bytes(encode_feature_file(frames, version=2))
    with pytest.raises(MixedDescriptorLength):
        FeatureFile(tmp_path / "m.fslf")


def test_feature_file_malformed(tmp_path, rng):
    blob = encode_feature_file({0: _frame(rng, 3, 16)})
    for bad in (b"XXXX" + blob[4:], blob[:-5], blob + b"\0", blob[:6]):
        (tmp_path / "bad.fslf").write_bytes(bad)
        with pytest.raises(MalformedRecord):
            FeatureFile(tmp_path / "bad.fslf")


def test_feature_file_octave_beyond_levels(tmp_path, rng):
    kps = Keypoints.from_xy(rng.uniform(0, 50, (2, 2)), octave=np.array([0, 5]))
    write_feature_file(tmp_path / "o.fslf", {0: (kps, Descriptors.real(rng.normal(size=(2, 8))))})
    with pytest.raises(MalformedRecord):
        load_external_features(tmp_path / "o.fslf", 0, n_levels=3)


def test_feature_file_zero_descriptor_rejected(tmp_path):
    kps = Keypoints.from_xy(np.ones((1, 2)))
    d = Descriptors("real", np.zeros((1, 8), np.float32), 8)
    write_feature_file(tmp_path / "z.fslf", {0: (kps, d)})
    with pytest.raises(MalformedRecord):
        load_external_features(tmp_path / "z.fslf", 0)
