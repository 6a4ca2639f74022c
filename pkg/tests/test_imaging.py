import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vbdeblur.errors import ParameterError, ShapeError
from vbdeblur.imaging import (
    aligned_image_metrics,
    best_alignment,
    kernel_recovery_error,
    linear_motion_kernel,
    load_image,
    load_kernel,
    psnr,
    random_walk_kernel,
    save_image,
    save_kernel,
    save_kernel_image,
    shifted_overlap,
    ssim,
    synthetic_sharp_image,
)


class TestPsnr:
    def test_identical_images_are_infinite(self):
        img = synthetic_sharp_image((16, 16), seed=1)
        assert psnr(img, img) == math.inf

    def test_known_mse_values(self):
        a = np.zeros((1, 10, 10))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
        assert psnr(a, a + 1.0) == pytest.approx(0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((1, 4, 4)), np.zeros((1, 5, 5)))

    def test_strictly_decreasing_with_noise_level(self, rng):
        img = synthetic_sharp_image((48, 48), seed=2)
        values = []
        for sigma in (0.01, 0.05, 0.1):
            noisy = np.clip(img + rng.normal(0, sigma, img.shape), 0, 1)
            values.append(psnr(img, noisy))
        assert values[0] > values[1] > values[2]


class TestSsim:
    def test_identity(self):
        img = synthetic_sharp_image((32, 32), seed=3)
        assert ssim(img, img) == pytest.approx(1.0)

    def test_inversion_is_not_identity(self):
        img = synthetic_sharp_image((32, 32), seed=4)
        assert ssim(img, 1.0 - img) < 1.0

    def test_symmetry(self, rng):
        a = rng.uniform(size=(1, 24, 24))
        b = rng.uniform(size=(1, 24, 24))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_window_larger_than_image(self):
        with pytest.raises(ParameterError):
            ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))

    def test_color_images_supported(self):
        img = synthetic_sharp_image((24, 24), channels=3, seed=5)
        assert ssim(img, img) == pytest.approx(1.0)


class TestKernelRecoveryError:
    def test_exact_match_is_zero(self):
        k = linear_motion_kernel((9, 9), angle_deg=20.0)
        assert kernel_recovery_error(k, k) == pytest.approx(0.0, abs=1e-15)

    def test_translation_is_forgiven(self):
        k = np.zeros((7, 7))
        k[2:5, 3] = 1.0 / 3.0
        shifted = np.roll(np.roll(k, 1, axis=0), 1, axis=1)
        assert kernel_recovery_error(shifted, k) == pytest.approx(0.0, abs=1e-15)

    def test_different_sizes_are_padded(self):
        k = linear_motion_kernel((5, 5), angle_deg=10.0)
        padded = np.zeros((9, 9))
        padded[2:7, 2:7] = k
        assert kernel_recovery_error(k, padded) == pytest.approx(0.0, abs=1e-15)

    def test_symmetric(self, rng):
        a = rng.uniform(size=(5, 5)) + 0.01
        b = rng.uniform(size=(7, 7)) + 0.01
        assert kernel_recovery_error(a, b) == pytest.approx(kernel_recovery_error(b, a), abs=1e-12)

    def test_delta_versus_line_is_large(self):
        line = linear_motion_kernel((9, 9), length=9.0, angle_deg=0.0)
        delta = np.zeros((9, 9))
        delta[4, 4] = 1.0
        assert kernel_recovery_error(delta, line) > 0.005

    def test_all_zero_kernel_rejected(self):
        with pytest.raises(ParameterError):
            kernel_recovery_error(np.zeros((3, 3)), np.ones((3, 3)))


class TestAlignment:
    def test_detects_known_shift(self):
        img = synthetic_sharp_image((32, 32), seed=6)
        shifted = np.roll(img, (2, -1), axis=(1, 2))
        dy, dx = best_alignment(shifted, img, max_shift=3)
        a, b = shifted_overlap(shifted, img, dy, dx)
        assert psnr(a, b) > 40.0

    def test_aligned_metrics_recover_shifted_copy(self):
        img = synthetic_sharp_image((32, 32), seed=7)
        shifted = np.roll(img, (0, 2), axis=(1, 2))
        plain = psnr(shifted, img)
        aligned_psnr, aligned_ssim = aligned_image_metrics(shifted, img, max_shift=2)
        assert aligned_psnr > plain
        assert aligned_psnr == math.inf
        assert aligned_ssim == pytest.approx(1.0)


class TestFileIO:
    def test_image_roundtrip_within_quantization(self, tmp_path, rng):
        img = rng.uniform(size=(3, 20, 20))
        path = tmp_path / "img.png"
        save_image(path, img)
        loaded = load_image(path)
        assert loaded.shape == (3, 20, 20)
        assert np.abs(loaded - img).max() <= 1.0 / 255.0

    def test_grayscale_roundtrip(self, tmp_path):
        img = synthetic_sharp_image((18, 22), seed=8)
        path = tmp_path / "gray.png"
        save_image(path, img)
        loaded = load_image(path)
        assert loaded.shape == (1, 18, 22)
        assert np.abs(loaded - img).max() <= 1.0 / 255.0

    def test_kernel_roundtrip_is_exact(self, tmp_path):
        kernel = random_walk_kernel((7, 7), seed=9)
        path = tmp_path / "kernel.txt"
        save_kernel(path, kernel)
        np.testing.assert_array_equal(load_kernel(path), kernel)

    def test_single_row_kernel_stays_2d(self, tmp_path):
        kernel = np.array([[0.25, 0.5, 0.25]])
        path = tmp_path / "row.txt"
        save_kernel(path, kernel)
        assert load_kernel(path).shape == (1, 3)

    def test_kernel_visualization_written(self, tmp_path):
        kernel = linear_motion_kernel((9, 9), angle_deg=45.0)
        path = tmp_path / "kernel.png"
        save_kernel_image(path, kernel)
        vis = load_image(path)
        assert vis.shape == (1, 9, 9)
        assert vis.max() == pytest.approx(1.0, abs=1e-6)

    def test_missing_image_raises_with_path(self, tmp_path):
        missing = tmp_path / "nope.png"
        with pytest.raises(OSError, match="nope.png"):
            load_image(missing)

    def test_corrupt_image_raises_with_path(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"this is not a png")
        with pytest.raises(OSError, match="bad.png"):
            load_image(bad)

    def test_corrupt_kernel_raises_with_path(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("1.0 2.0\nnot numbers here\n")
        with pytest.raises(OSError, match="bad.txt"):
            load_kernel(bad)


class TestSyntheticData:
    @given(angle=st.floats(min_value=0.0, max_value=180.0))
    @settings(max_examples=25, deadline=None)
    def test_linear_kernel_is_normalized(self, angle):
        kernel = linear_motion_kernel((9, 9), angle_deg=angle)
        assert kernel.min() >= 0.0
        assert kernel.sum() == pytest.approx(1.0)

    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_random_walk_kernel_is_normalized(self, seed):
        kernel = random_walk_kernel((7, 7), seed=seed)
        assert kernel.min() >= 0.0
        assert kernel.sum() == pytest.approx(1.0)

    def test_random_walk_deterministic_per_seed(self):
        a = random_walk_kernel((7, 7), seed=11)
        b = random_walk_kernel((7, 7), seed=11)
        np.testing.assert_array_equal(a, b)
        c = random_walk_kernel((7, 7), seed=12)
        assert not np.array_equal(a, c)

    def test_synthetic_image_range_and_determinism(self):
        a = synthetic_sharp_image((40, 40), channels=3, seed=13)
        b = synthetic_sharp_image((40, 40), channels=3, seed=13)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (3, 40, 40)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_synthetic_image_has_sparse_gradients(self):
        img = synthetic_sharp_image((64, 64), seed=14)
        grads = np.abs(np.diff(img, axis=1))
        assert (grads < 1e-6).mean() > 0.8
