import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from portrait_anim import metrics
from portrait_anim.errors import ShapeMismatchError


def test_identical_frames_capped():
    x = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert metrics.psnr(x, x) == 99.0
    assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_psnr_textbook_formula():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(20, 30, 3)), rng.uniform(size=(20, 30, 3))
    mse = sum((a[idx] - b[idx]) ** 2 for idx in np.ndindex(a.shape)) / a.size
    assert abs(metrics.psnr(a, b) - 10 * np.log10(1.0 / mse)) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(16, 40), st.integers(16, 40))
def test_psnr_ssim_match_reference_library(seed, h, w):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(h, w, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(metrics.psnr(a, b) - peak_signal_noise_ratio(a, b, data_range=1.0)) < 1e-6
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=True)
    assert abs(metrics.ssim(a, b) - ref) < 1e-6


def test_ssim_grayscale_and_errors():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(24, 24)), rng.uniform(size=(24, 24))
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5)
    assert abs(metrics.ssim(a, b) - ref) < 1e-6
    with pytest.raises(ShapeMismatchError):
        metrics.ssim(a, b[:20])
    with pytest.raises(ShapeMismatchError):
        metrics.psnr(a, b[:20])


def test_mean_metrics_average_frames():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(3, 16, 16, 3)), rng.uniform(size=(3, 16, 16, 3))
    assert metrics.mean_psnr(a, b) == pytest.approx(np.mean([metrics.psnr(x, y) for x, y in zip(a, b)]))


def test_diversity_static_and_known():
    static = np.broadcast_to(np.random.default_rng(4).normal(size=(1, 5, 3)), (10, 5, 3))
    assert metrics.diversity(static) == 0.0
    alt = np.zeros((4, 2, 3))
    alt[1::2] = 1.0
    assert metrics.diversity(alt) == pytest.approx(0.25)
    with pytest.raises(ShapeMismatchError):
        metrics.diversity(np.zeros((4, 3)))
