import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from fslam.errors import UnreadableInput, UnwritableOutput
from fslam.imaging import (GAMMA_GRID, GammaParam, distort_sequence, gamma_lut, gamma_transform, read_image,
                           to_gray, write_image)

ALL = np.arange(256, dtype=np.uint8)


def test_identity_gamma_is_bit_exact():
    img = np.random.default_rng(0).integers(0, 256, (48, 64), dtype=np.uint8)
    assert np.array_equal(gamma_transform(img, 1.0), img)


@pytest.mark.parametrize("g", GAMMA_GRID + (0.1, 1.0, 7.0))
def test_endpoints_fixed(g):
    out = gamma_transform(np.array([0, 255], np.uint8), g)
    assert out.tolist() == [0, 255]


def test_direct_formula():
    assert gamma_transform(np.array([128], np.uint8), 2.0)[0] == 64
    # exhaustive agreement with the scalar definition
    for g in GAMMA_GRID:
        expect = [min(255, int(np.floor(255 * (p / 255) ** g + 0.5))) for p in range(256)]
        assert gamma_lut(g).tolist() == expect


@given(st.floats(0.05, 20))
def test_monotone_and_pointwise_direction(g):
    out = gamma_transform(ALL, g).astype(int)
    assert np.all(np.diff(out) >= 0)
    if g < 1:
        assert np.all(out >= ALL)
    elif g > 1:
        assert np.all(out <= ALL)


def test_overexposure_round_trip_within_three_levels():
    for g in (0.25, 0.5):
        back = gamma_transform(gamma_transform(ALL, g), 1 / g).astype(int)
        assert np.abs(back - ALL).max() <= 3


def test_continuous_round_trip_is_exact():
    x = np.linspace(0, 1, 1001)
    for g in GAMMA_GRID:
        assert np.allclose((x**g) ** (1 / g), x, atol=1e-12)


@pytest.mark.parametrize("g", [0.0, -1.0, float("nan"), float("inf")])
def test_invalid_gamma(g):
    with pytest.raises(ValueError):
        GammaParam(g)
    with pytest.raises(ValueError):
        gamma_transform(ALL, g)


def test_shape_preserved_and_dtype_checked():
    img = np.zeros((7, 5), np.uint8)
    assert gamma_transform(img, 2.0).shape == (7, 5)
    with pytest.raises(ValueError):
        gamma_transform(img.astype(np.float32), 2.0)


def test_luma_conversion():
    rgb = np.zeros((2, 2, 3), np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[0, 1] = (0, 255, 0)
    rgb[1, 0] = (0, 0, 255)
    rgb[1, 1] = (200, 200, 200)
    assert to_gray(rgb).tolist() == [[76, 150], [29, 200]]


def _write_seq(d, n, rng, value=None):
    d.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        img = (np.full((20, 30), value, np.uint8) if value is not None
               else rng.integers(20, 236, (20, 30), dtype=np.uint8))
        write_image(d / f"{i:06d}.png", img)


def test_distort_overexposure_brightens(tmp_path):
    _write_seq(tmp_path / "in", 10, np.random.default_rng(0))
    assert distort_sequence(tmp_path / "in", tmp_path / "out", 0.25) == 10
    for p in sorted((tmp_path / "in").iterdir()):
        assert read_image(tmp_path / "out" / p.name).mean() > read_image(p).mean()


def test_distort_underexposure_darkens_mid_gray(tmp_path):
    _write_seq(tmp_path / "in", 3, None, value=128)
    distort_sequence(tmp_path / "in", tmp_path / "out", GammaParam(4.0), workers=2)
    for p in (tmp_path / "out").iterdir():
        assert read_image(p).mean() < 128


def test_distort_identity_copies_bytes(tmp_path):
    _write_seq(tmp_path / "in", 2, np.random.default_rng(1))
    distort_sequence(tmp_path / "in", tmp_path / "out", 1.0)
    for p in (tmp_path / "in").iterdir():
        assert (tmp_path / "out" / p.name).read_bytes() == p.read_bytes()


def test_distort_concurrent_matches_serial(tmp_path):
    _write_seq(tmp_path / "in", 6, np.random.default_rng(2))
    distort_sequence(tmp_path / "in", tmp_path / "a", 2.0, workers=1)
    distort_sequence(tmp_path / "in", tmp_path / "b", 2.0, workers=4)
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_distort_empty_directory(tmp_path):
    (tmp_path / "in").mkdir()
    assert distort_sequence(tmp_path / "in", tmp_path / "out", 2.0) == 0


def test_distort_colour_and_pgm(tmp_path):
    d = tmp_path / "in"
    d.mkdir()
    Image.fromarray(np.full((4, 4, 3), 100, np.uint8), "RGB").save(d / "a.png")
    write_image(d / "b.pgm", np.full((4, 4), 100, np.uint8))
    assert distort_sequence(d, tmp_path / "out", 0.5) == 2
    expect = gamma_lut(0.5)[100]
    assert np.all(read_image(tmp_path / "out" / "a.png") == expect)
    assert np.all(read_image(tmp_path / "out" / "b.pgm") == expect)


def test_distort_errors(tmp_path):
    with pytest.raises(UnreadableInput):
        distort_sequence(tmp_path / "missing", tmp_path / "out", 2.0)
    d = tmp_path / "in"
    d.mkdir()
    (d / "bad.png").write_bytes(b"not an image")
    with pytest.raises(UnreadableInput):
        distort_sequence(d, tmp_path / "out", 2.0)
    _write_seq(tmp_path / "ok", 1, np.random.default_rng(0))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(UnwritableOutput):
        distort_sequence(tmp_path / "ok", blocker / "sub", 2.0)
