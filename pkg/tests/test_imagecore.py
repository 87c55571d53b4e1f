import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from virtualde import imagecore as ic
from virtualde.imagecore import DESample, Image, ImageError

import oracles

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def img(a):
    return Image.from_array(np.asarray(a, dtype=float))


# -- Image -----------------------------------------------------------------

def test_image_is_read_only_copy():
    a = np.arange(9.0).reshape(3, 3)
    im = img(a)
    a[0, 0] = 100
    assert im.pixels[0, 0] == 0
    with pytest.raises(ValueError):
        im.pixels[0, 0] = 1


@pytest.mark.parametrize("bad", [np.array([[np.nan, 1.0]]), np.array([[np.inf, 0.0]])])
def test_image_rejects_non_finite(bad):
    with pytest.raises(ImageError):
        Image(bad, 0.0, 1.0)


def test_image_rejects_out_of_bounds_and_empty():
    with pytest.raises(ImageError):
        Image(np.array([[2.0]]), 0.0, 1.0)
    with pytest.raises(ImageError):
        Image(np.zeros((0, 3)), 0.0, 1.0)
    with pytest.raises(ImageError):
        Image(np.zeros(4), 0.0, 1.0)


def test_desample_shape_check():
    a, b = img(np.zeros((4, 4))), img(np.zeros((4, 5)))
    with pytest.raises(ImageError):
        DESample("x", a, b)


# -- normalization ---------------------------------------------------------

def test_normalize_small_example():
    n = ic.normalize(img([[0.0, 5.0], [10.0, 2.5]]))
    assert n.pixels.tolist() == [[-1.0, 0.0], [1.0, -0.5]]
    assert (n.intensity_min, n.intensity_max) == (0.0, 10.0)
    assert n.normalized


def test_constant_image_maps_to_zero():
    n = ic.normalize(img(np.full((3, 3), 7.0)))
    assert np.all(n.pixels == 0) and n.meta["constant"]
    d = ic.denormalize(n)
    assert np.all(d.pixels == 7.0)


def test_denormalize_clamps_and_counts():
    n = Image(np.array([[-2.0, 0.0, 1.5]]), 0.0, 4.0, normalized=True)
    d = ic.denormalize(n)
    assert d.pixels.tolist() == [[0.0, 2.0, 4.0]]
    assert d.meta["clamped"] == 2


def test_denormalize_explicit_target():
    n = Image(np.array([[-1.0, 1.0]]), 0.0, 1.0, normalized=True)
    assert ic.denormalize(n, 10, 20).pixels.tolist() == [[10.0, 20.0]]
    with pytest.raises(ImageError):
        ic.denormalize(n, 2, 1)


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=finite))
def test_normalize_range_and_roundtrip(a):
    n = ic.normalize(img(a))
    assert n.pixels.min() >= -1 and n.pixels.max() <= 1
    if a.max() > a.min():
        assert n.pixels.min() == -1 and n.pixels.max() == 1
    back = ic.denormalize(n)
    scale = max(1.0, float(np.abs(a).max()))
    assert np.max(np.abs(back.pixels - a)) <= 1e-12 * scale


# -- filters ---------------------------------------------------------------

def test_sobel_ramp_gives_eight():
    x = np.tile(np.arange(6.0), (5, 1))
    g = ic.sobel(img(x))
    assert np.all(g.gx[:, 1:-1] == 8.0)
    assert np.all(g.gy == 0.0)


def test_sobel_matches_dense_oracle(rng):
    a = rng.normal(size=(9, 7))
    gx, gy = ic.sobel_arrays(a)
    ox, oy = oracles.sobel(a)
    assert np.allclose(gx, ox, rtol=0, atol=1e-12) and np.allclose(gy, oy, rtol=0, atol=1e-12)


def test_filters_reject_tiny_images():
    with pytest.raises(ImageError):
        ic.sobel(img(np.zeros((2, 5))))
    with pytest.raises(ImageError):
        ic.gaussian_blur(img(np.zeros((2, 2))), 3, 1.0)


def test_gaussian_kernel_properties():
    k = ic.gaussian_kernel(13, 3.16)
    assert abs(k.sum() - 1) < 1e-12
    assert np.allclose(k, k[::-1])
    assert np.argmax(k) == 6
    assert np.allclose(k, oracles.gaussian_taps(13, 3.16), atol=1e-15)
    for bad in [(4, 1.0), (0, 1.0), (5, 0.0)]:
        with pytest.raises(ImageError):
            ic.gaussian_kernel(*bad)


def test_blur_matches_dense_oracle(rng):
    a = rng.uniform(size=(10, 12))
    assert np.allclose(ic.blur_array(a, 5, 1.3), oracles.blur(a, 5, 1.3), atol=1e-12)


def test_blur_preserves_constant_and_range(rng):
    c = img(np.full((8, 8), 3.0))
    assert np.allclose(ic.gaussian_blur(c, 5, 2.0).pixels, 3.0)
    a = img(rng.uniform(size=(16, 16)))
    b = ic.gaussian_blur(a, 7, 2.0)
    assert b.pixels.min() >= a.pixels.min() and b.pixels.max() <= a.pixels.max()


def test_blur_rejects_degenerate_kernel():
    with pytest.raises(ImageError):
        ic.gaussian_blur(img(np.zeros((4, 4))), 17, 5.0)


def test_scaled_blur_params_at_128():
    k, s = ic.scaled_blur_params(128)
    assert k == 13 and abs(s - 50 * 128 / 2022) < 1e-12
    assert ic.scaled_blur_params(2022) == (201, 50.0)


# -- patches and augmentation ----------------------------------------------

def test_extract_patch_centre_convention():
    a = img(np.arange(64.0).reshape(8, 8))
    p = ic.extract_patch(a, 4, 4, 8)
    assert np.array_equal(p.pixels, a.pixels)
    q = ic.extract_patch(a, 3, 2, 3)
    assert np.array_equal(q.pixels, a.pixels[1:4, 2:5])
    with pytest.raises(ImageError):
        ic.extract_patch(a, 0, 0, 3)


def test_gradient_patch():
    g = ic.GradientField(np.arange(16.0).reshape(4, 4), np.zeros((4, 4)))
    assert g.patch(1, 2, 2).gx.tolist() == [[9.0, 10.0], [13.0, 14.0]]


def _sample(rng, n=32):
    a = rng.uniform(size=(n, n))
    b = rng.uniform(size=(n, n))
    return DESample("s", img(a + b), img(b), img(a))


def test_augment_zero_ranges_is_identity(rng):
    s = _sample(rng)
    t = ic.augment(s, 5, 0, 0)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(s.images(), t.images()))


def test_augment_deterministic_and_shared(rng):
    s = _sample(rng)
    a, b = ic.augment(s, 9, 3, 10), ic.augment(s, 9, 3, 10)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.images(), b.images()))
    c = ic.augment(s, 10, 3, 10)
    assert not np.array_equal(a.standard.pixels, c.standard.pixels)
    # one transform for every image: the linear relation survives in the interior
    inner = (slice(10, 22), slice(10, 22))
    assert np.allclose(a.standard.pixels[inner],
                       a.bone.pixels[inner] + a.soft.pixels[inner], atol=1e-12)


def test_warp_integer_translation():
    a = np.zeros((9, 9))
    a[4, 4] = 1.0
    w = ic.warp(img(a), 2, 1, 0)
    assert w.pixels[5, 6] == pytest.approx(1.0)
    assert w.pixels.sum() == pytest.approx(1.0)


def test_warp_rotation_by_90_about_centre():
    a = np.zeros((9, 9))
    a[4, 7] = 1.0   # right of centre
    w = ic.warp(img(a), 0, 0, 90)
    # positive angles turn +x towards +y
    assert w.pixels[7, 4] == pytest.approx(1.0)


def test_warp_fill_uses_intensity_min():
    a = Image(np.full((8, 8), 5.0), -3.0, 10.0)
    w = ic.warp(a, 4, 0, 0)
    assert np.all(w.pixels[:, :4] == -3.0)


def test_augment_rejects_negative_range(rng):
    with pytest.raises(ImageError):
        ic.augment(_sample(rng), 0, -1, 0)


# -- I/O -------------------------------------------------------------------

def test_pfm_roundtrip_exact(tmp_path, rng):
    a = rng.normal(size=(5, 7)).astype(np.float32).astype(np.float64)
    ic.write_pfm(tmp_path / "a.pfm", a)
    assert np.array_equal(ic.read_pfm(tmp_path / "a.pfm"), a)


def test_image_roundtrip_with_sidecar(tmp_path, rng):
    a = Image(rng.uniform(size=(6, 6)).astype(np.float32), -1.0, 2.0)
    p = ic.write_image(tmp_path / "x.pfm", a, image_id="x")
    b = ic.read_image(p)
    assert np.array_equal(a.pixels, b.pixels)
    assert (b.intensity_min, b.intensity_max) == (-1.0, 2.0)
    assert ic.sidecar_path(p).exists()


def test_png16_roundtrip(tmp_path, rng):
    a = Image(rng.uniform(size=(6, 5)), 0.0, 1.0)
    p = ic.write_image(tmp_path / "x.png", a)
    b = ic.read_image(p)
    assert b.shape == (6, 5)
    assert np.max(np.abs(a.pixels - b.pixels)) <= 1.0 / 65535


def test_read_missing_and_corrupt(tmp_path):
    with pytest.raises((OSError, ImageError)):
        ic.read_image(tmp_path / "nope.pfm")
    bad = tmp_path / "bad.pfm"
    bad.write_bytes(b"P5\n1 1\n")
    with pytest.raises((ValueError, ImageError)):
        ic.read_pfm(bad)
