import numpy as np
import pytest
from hypothesis import given, strategies as st

from codedstereo.errors import ConfigurationError, DomainError
from codedstereo.optics import PhaseMask, PSFStack, kernel_second_moment
from codedstereo.render import (Scene, add_noise, convolve_same, level_indices, matting_weights,
                                noise_sigma_for, preshift_right, quantize_disparity, render_coded_image,
                                render_stereo_pair, view_seeds)
from codedstereo.scenes import band_scene, pink_noise_texture, plane_scene, two_plane_scene


def delta_stack(config):
    k = np.zeros((3, config.num_disparity_levels, config.psf_kernel_size, config.psf_kernel_size))
    k[..., config.psf_kernel_size // 2, config.psf_kernel_size // 2] = 1.0
    return PSFStack(k, config.disparity_levels, config.wavelengths)


def direct_convolve(image, kernel):
    # Brute-force edge-replicated "same" convolution (oracle for the FFT path).
    k = kernel.shape[0]
    r = k // 2
    pad = np.pad(image, r, mode="edge")
    h, w = image.shape
    out = np.zeros((h, w))
    for i in range(k):
        for j in range(k):
            out += kernel[i, j] * pad[2 * r - i:2 * r - i + h, 2 * r - j:2 * r - j + w]
    return out


def test_fft_convolution_matches_direct_sum():
    rng = np.random.default_rng(0)
    img = rng.random((20, 27))
    ker = rng.random((8, 8))
    np.testing.assert_allclose(convolve_same(img, ker), direct_convolve(img, ker), atol=1e-12)


def test_quantize_single_level(config):
    layers = quantize_disparity(np.full((4, 5), 96.0), config)
    present = np.nonzero(layers.masks.any(axis=(1, 2)))[0]
    assert list(present) == [10]


def test_quantize_tie_goes_to_lower_level(config):
    mid = 0.5 * (config.disparity_levels[3] + config.disparity_levels[4])
    assert level_indices(np.array([[mid]]), config.disparity_levels)[0, 0] == 3


def test_quantize_two_planes_partition(config):
    disp = np.zeros((16, 16))
    disp[:, 8:] = 192
    layers = quantize_disparity(disp, config)
    assert np.count_nonzero(layers.masks.any(axis=(1, 2))) == 2
    assert np.all(layers.masks.sum(axis=0) == 1)


@given(st.lists(st.floats(-20, 220), min_size=12, max_size=12))
def test_quantize_partition_and_nearest(config, values):
    disp = np.array(values).reshape(3, 4)
    layers = quantize_disparity(disp, config)
    assert np.all(layers.masks.sum(axis=0) == 1)
    assert layers.clamp_count == int(np.sum((disp < 0) | (disp > 192)))
    idx = layers.index_map
    d = np.clip(disp, 0, 192)
    err = np.abs(config.disparity_levels[idx] - d)
    assert np.all(err <= config.level_spacing / 2 + 1e-9)


def test_flat_field_preserved(config, flat_stack):
    disp = np.zeros((40, 60))
    disp[:, 20:] = 96
    disp[10:30, 40:] = 192
    out = render_coded_image(np.full((40, 60, 3), 0.5), quantize_disparity(disp, config), flat_stack)
    assert np.abs(out - 0.5).max() < 1e-4


def test_single_layer_is_plain_convolution(config, cubic_stack):
    rng = np.random.default_rng(1)
    tex = rng.random((24, 30, 3))
    out = render_coded_image(tex, quantize_disparity(np.full((24, 30), 48.0), config), cubic_stack)
    for c in range(3):
        np.testing.assert_allclose(out[..., c], direct_convolve(tex[..., c], cubic_stack.kernels[c, 5]), atol=1e-10)


def test_delta_psf_is_identity(config):
    rng = np.random.default_rng(2)
    tex = rng.random((16, 20, 3))
    disp = rng.uniform(0, 192, (16, 20))
    out = render_coded_image(tex, quantize_disparity(disp, config), delta_stack(config))
    np.testing.assert_allclose(out, tex, atol=1e-12)


def test_render_linear_in_texture(config, flat_stack):
    rng = np.random.default_rng(3)
    disp = np.where(np.arange(32)[None, :] < 16, 10.0, 150.0) * np.ones((24, 1))
    layers = quantize_disparity(disp, config)
    a, b = rng.random((24, 32, 3)), rng.random((24, 32, 3))
    lhs = render_coded_image(0.3 * a + 0.7 * b, layers, flat_stack)
    rhs = 0.3 * render_coded_image(a, layers, flat_stack) + 0.7 * render_coded_image(b, layers, flat_stack)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_matting_weights_sum_to_one(config, flat_stack):
    disp = np.zeros((20, 30))
    disp[5:15, 10:20] = 192
    w = matting_weights(quantize_disparity(disp, config), flat_stack)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_level_mismatch_rejected(config, flat_stack):
    layers = quantize_disparity(np.zeros((8, 8)), config.with_(num_disparity_levels=11))
    with pytest.raises(ConfigurationError):
        render_coded_image(np.zeros((8, 8, 3)), layers, flat_stack)


def test_brightness_conserved(config, flat_stack):
    scene = band_scene((64, 96), [0, 96, 192], seed=4)
    out = render_coded_image(scene.texture_left, quantize_disparity(scene.disparity_left, config), flat_stack)
    assert abs(out.mean() - scene.texture_left.mean()) < 0.01 * scene.texture_left.mean()


def test_preshift(config):
    a = np.arange(200 * 2, dtype=float).reshape(2, 200)
    out = preshift_right(a, config)
    np.testing.assert_array_equal(out[:, 134:], a[:, :66])
    np.testing.assert_array_equal(out[:, :134], np.repeat(a[:, :1], 134, axis=1))
    assert preshift_right(np.full((1, 200), 326.0), config, is_disparity=True)[0, -1] == 192
    assert preshift_right(np.full((1, 200), 134.0), config, is_disparity=True)[0, -1] == 0
    with pytest.raises(DomainError):
        preshift_right(np.zeros((2, 134)), config)


def test_add_noise_statistics_and_determinism():
    img = np.full((1000, 1000), 0.5)
    noisy = add_noise(img, 0.02, 7)
    assert 0.0195 <= (noisy - img).std() <= 0.0205
    np.testing.assert_array_equal(noisy, add_noise(img, 0.02, 7))
    np.testing.assert_array_equal(add_noise(img, 0.0, 7), img)
    with pytest.raises(DomainError):
        add_noise(img, -0.1, 0)


def test_noise_sigma_scaling():
    assert noise_sigma_for(8) == pytest.approx(0.02)
    assert noise_sigma_for(32) == pytest.approx(0.32)
    assert noise_sigma_for(32, exposure=16) == pytest.approx(0.02)
    with pytest.raises(DomainError):
        noise_sigma_for(0)


def test_view_seeds_independent():
    a, b = view_seeds(5)
    assert a != b and view_seeds(5) == (a, b)


def test_render_pair_delta_and_noise(config):
    scene = band_scene((32, 224), [10, 120], seed=5)
    mask = PhaseMask.flat()
    clean = render_stereo_pair(scene, mask, config, 0.0, 1, stack=delta_stack(config))
    np.testing.assert_allclose(clean.coded_left, scene.texture_left, atol=1e-12)
    np.testing.assert_allclose(clean.coded_right, scene.texture_right, atol=1e-12)
    p1 = render_stereo_pair(scene, mask, config, 0.01, 1, stack=delta_stack(config))
    p2 = render_stereo_pair(scene, mask, config, 0.01, 2, stack=delta_stack(config))
    inner = (p1.coded_left > 0.05) & (p1.coded_left < 0.95) & (p2.coded_left > 0.05) & (p2.coded_left < 0.95)
    diff = (p1.coded_left - p2.coded_left)[inner]
    assert diff.std() == pytest.approx(0.01 * np.sqrt(2), rel=0.05)
    p1b = render_stereo_pair(scene, mask, config, 0.01, 1, stack=delta_stack(config))
    np.testing.assert_array_equal(p1.coded_left, p1b.coded_left)


def _autocorr(img, r):
    f = np.fft.fft2(img - img.mean())
    ac = np.fft.fftshift(np.real(np.fft.ifft2(np.abs(f) ** 2)))
    h, w = ac.shape
    return ac[h // 2 - r:h // 2 + r + 1, w // 2 - r:w // 2 + r + 1]


def test_blur_transfer_matches_psf_autocorrelation(config, flat_stack):
    # White noise blurred by k has autocorrelation proportional to k (*) flip(k).
    rng = np.random.default_rng(6)
    noise = rng.random((512, 512))
    tex = np.repeat(noise[..., None], 3, axis=2)
    scene = Scene(tex, tex, np.full((512, 512), 192.0), np.full((512, 512), 192.0), "plane")
    pair = render_stereo_pair(scene, PhaseMask.flat(), config, 0.0, 0, stack=flat_stack)
    measured = _autocorr(pair.coded_left[64:-64, 64:-64, 1], 20)
    measured /= np.linalg.norm(measured)
    errors = []
    for i in range(config.num_disparity_levels):
        expected = _autocorr(np.pad(flat_stack.kernels[1, i], 64), 20)
        errors.append(np.linalg.norm(measured - expected / np.linalg.norm(expected)))
    assert int(np.argmin(errors)) == 20
    assert errors[20] < 0.13
    assert kernel_second_moment(flat_stack.kernels[1, 20]) > 5


def test_scene_shape_validation():
    with pytest.raises(DomainError):
        Scene(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4)), np.zeros((4, 4)))


def test_scene_clamp_fraction(config):
    d = np.full((4, 4), 100.0)
    d[0] = 250
    s = Scene(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), d, d.copy()).clamped(config)
    assert s.clamp_fraction == pytest.approx(0.25)
    assert s.disparity_left.max() == 192


def test_band_scene_correspondence():
    s = band_scene((30, 80), [0, 7, 19], seed=1)
    for y in range(30):
        d = int(s.disparity_left[y, 0])
        np.testing.assert_array_equal(s.texture_left[y, d:], s.texture_right[y, :80 - d])


def test_two_plane_scene_correspondence():
    s = two_plane_scene((40, 120), 10, 30, rect=(10, 30, 60, 90), seed=2)
    assert set(np.unique(s.disparity_left)) == {10.0, 30.0}
    for y, x in [(5, 50), (20, 70), (20, 95), (35, 100)]:
        d = int(s.disparity_left[y, x])
        np.testing.assert_array_equal(s.texture_left[y, x], s.texture_right[y, x - d])


def test_pink_noise_range_and_determinism():
    a = pink_noise_texture((32, 48), 3)
    assert a.shape == (32, 48, 3) and a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, pink_noise_texture((32, 48), 3))
    assert plane_scene((8, 16), 5).id == "plane_d5"
