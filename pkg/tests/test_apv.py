import numpy as np
import pytest

from uniabg.apv import (
    LMS_FLOOR, ChannelStats, RasterImage, color_transfer, global_stats, image_stats, lab_to_rgb,
    read_ppm, rgb_to_lab, transfer_lab, write_ppm,
)
from uniabg.errors import FormatError, ValidationError

import oracles

# frozen from oracles.pixel_to_lab
LAB_RED = (-1.5827986053637442, 0.860970629891617, 0.20301334709835994)
LAB_GREENISH = (-0.7229573703176353, 0.33995209236484747, -0.06523364237567202)
LAB_GRAY128_L = -0.5184551333218039
LAB_BLACK_L = -10.392304845413264  # 3 * log10(1e-6) / sqrt(3)


def solid(rgb, h=4, w=5):
    return RasterImage(np.tile(np.array(rgb, dtype=np.uint8), (h, w, 1)))


def random_image(rng, h=12, w=9):
    return RasterImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


def test_mid_gray_is_achromatic():
    lab = rgb_to_lab(solid((128, 128, 128)))
    assert np.abs(lab[..., 1:]).max() < 1e-6
    np.testing.assert_allclose(lab[..., 0], LAB_GRAY128_L, atol=1e-12)


def test_frozen_pixels():
    lab = rgb_to_lab(RasterImage(np.array([[[255, 0, 0], [10, 200, 30]]], dtype=np.uint8)))
    np.testing.assert_allclose(lab[0, 0], LAB_RED, atol=1e-12)
    np.testing.assert_allclose(lab[0, 1], LAB_GREENISH, atol=1e-12)


def test_matches_pixel_oracle(rng):
    img = random_image(rng, 5, 4)
    lab = rgb_to_lab(img)
    for y in range(5):
        for x in range(4):
            np.testing.assert_allclose(lab[y, x], oracles.pixel_to_lab(img.pixels[y, x]), atol=1e-12)


def test_black_hits_the_floor():
    lab = rgb_to_lab(solid((0, 0, 0)))
    np.testing.assert_allclose(lab[..., 0], LAB_BLACK_L, atol=1e-12)
    np.testing.assert_allclose(lab[..., 1:], 0.0, atol=1e-12)
    assert np.isclose(LAB_BLACK_L, 3 * np.log10(LMS_FLOOR) / np.sqrt(3))


def test_round_trip_within_one(rng):
    for _ in range(20):
        img = random_image(rng)
        back = lab_to_rgb(rgb_to_lab(img))
        assert np.abs(back.pixels.astype(int) - img.pixels.astype(int)).max() <= 1


def test_gray_round_trip():
    img = solid((128, 128, 128))
    assert np.abs(lab_to_rgb(rgb_to_lab(img)).pixels.astype(int) - 128).max() <= 1


def test_out_of_gamut_clips():
    lab = np.zeros((1, 3, 3))
    lab[0, 0] = (50.0, 0.0, 0.0)   # enormous luminance
    lab[0, 1] = (-50.0, 0.0, 0.0)  # far below black
    lab[0, 2] = (0.0, 30.0, 0.0)
    px = lab_to_rgb(lab).pixels
    np.testing.assert_array_equal(px[0, 0], [255, 255, 255])
    np.testing.assert_array_equal(px[0, 1], [0, 0, 0])
    assert px.dtype == np.uint8 and set(np.unique(px[0, 2])) <= {0, 255}


def test_constant_image_stats():
    st = global_stats([solid((200, 40, 90))])
    np.testing.assert_allclose(st.std, 0.0, atol=1e-12)
    np.testing.assert_allclose(st.mean, oracles.pixel_to_lab((200, 40, 90)), atol=1e-12)


def test_two_constants_pooled_by_pixel_count():
    a, b = solid((200, 40, 90), 2, 2), solid((10, 10, 250), 4, 3)  # 4 and 12 pixels
    la, lb = np.array(oracles.pixel_to_lab((200, 40, 90))), np.array(oracles.pixel_to_lab((10, 10, 250)))
    st = global_stats([a, b])
    np.testing.assert_allclose(st.mean, (4 * la + 12 * lb) / 16, atol=1e-12)
    np.testing.assert_allclose(st.std, np.abs(la - lb) * np.sqrt(4 * 12) / 16, atol=1e-12)


def test_stats_duplication_invariant(rng):
    imgs = [random_image(rng) for _ in range(3)]
    one, two = global_stats(imgs), global_stats(imgs + imgs)
    np.testing.assert_allclose(two.mean, one.mean, atol=1e-12)
    np.testing.assert_allclose(two.std, one.std, atol=1e-12)


def test_stats_match_population_oracle(rng):
    imgs = [random_image(rng, 3, 4), random_image(rng, 2, 2)]
    st = global_stats(imgs)
    labs = np.vstack([rgb_to_lab(im).reshape(-1, 3) for im in imgs])
    for c in range(3):
        mu, sd = oracles.population_stats(labs[:, c])
        assert abs(st.mean[c] - mu) < 1e-12 and abs(st.std[c] - sd) < 1e-12


def test_empty_stats_rejected():
    with pytest.raises(ValueError):
        global_stats([])


def test_self_transfer_is_identity(rng):
    for _ in range(20):
        img = random_image(rng)
        out = color_transfer(img, image_stats(rgb_to_lab(img)))
        assert np.abs(out.pixels.astype(int) - img.pixels.astype(int)).max() <= 1


def test_constant_drone_takes_target_mean():
    target = ChannelStats([-0.4, 0.02, -0.01], [0.1, 0.05, 0.02])
    out = transfer_lab(rgb_to_lab(solid((90, 120, 60))), target)
    np.testing.assert_array_equal(out.reshape(-1, 3), np.tile(target.mean, (20, 1)))


def _random_target(rng):
    return ChannelStats(rng.normal([-0.5, 0.0, 0.0], [0.3, 0.05, 0.05]), rng.uniform(0.01, 0.4, 3))


def test_pre_clip_stats_match_target(rng):
    for _ in range(20):
        target = _random_target(rng)
        out = transfer_lab(rgb_to_lab(random_image(rng)), target)
        for c in range(3):
            mu, sd = oracles.population_stats(out[..., c].ravel())
            assert abs(mu - target.mean[c]) < 1e-6 and abs(sd - target.std[c]) < 1e-6


def test_transfer_idempotent_in_stats(rng):
    target = _random_target(rng)
    once = color_transfer(random_image(rng), target)
    twice = transfer_lab(rgb_to_lab(once), target)
    st = image_stats(twice)
    np.testing.assert_allclose(st.mean, target.mean, atol=1e-6)
    np.testing.assert_allclose(st.std, target.std, atol=1e-6)


def test_luminance_rank_preserved(rng):
    img = random_image(rng)
    lab = rgb_to_lab(img)
    out = transfer_lab(lab, _random_target(rng))
    a, b = lab[..., 0].ravel(), out[..., 0].ravel()
    np.testing.assert_array_equal(np.argsort(a, kind="stable"), np.argsort(b, kind="stable"))


def test_raster_validation():
    with pytest.raises(ValidationError):
        RasterImage(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        RasterImage(np.full((1, 1, 3), 300))
    with pytest.raises(ValidationError):
        ChannelStats([0, 0, 0], [0.1, -0.1, 0])


def test_ppm_round_trip(tmp_path, rng):
    img = random_image(rng, 7, 3)
    write_ppm(img, tmp_path / "a.ppm")
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n3 7\n255\n")
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm").pixels, img.pixels)


def test_ppm_header_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([1, 2, 3]))
    np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm").pixels, [[[1, 2, 3]]])


@pytest.mark.parametrize("payload", [b"P3\n1 1\n255\n1 2 3", b"P6\n2 2\n255\n\x00\x00", b"P6\n1 1\n65535\n" + b"\0" * 6])
def test_ppm_errors(tmp_path, payload):
    (tmp_path / "b.ppm").write_bytes(payload)
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "b.ppm")
