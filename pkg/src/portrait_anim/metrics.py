"""Image and motion quality metrics."""
import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter1d

from .errors import ShapeMismatchError

PSNR_CAP = 99.0


def psnr(a, b, data_range=1.0):
    """Peak signal-to-noise ratio in dB, capped at :data:`PSNR_CAP` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= data_range ** 2 * 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(data_range ** 2 / mse))


def mean_psnr(frames_a, frames_b, data_range=1.0):
    return float(np.mean([psnr(x, y, data_range) for x, y in zip(frames_a, frames_b)]))


def ssim(a, b, data_range=1.0, sigma=1.5):
    """Gaussian-window structural similarity of ``H x W`` or ``H x W x C`` images, channel-averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range, sigma) for c in range(a.shape[2])]))
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    trunc = 3.5
    pad = int(trunc * sigma + 0.5)

    def filt(x):
        return gaussian_filter(x, sigma, truncate=trunc, mode="reflect")

    # unbiased covariance, matching the common reference implementation
    n = (2 * pad + 1) ** 2
    cov_norm = n / (n - 1.0)
    mu_a, mu_b = filt(a), filt(b)
    va = cov_norm * (filt(a * a) - mu_a ** 2)
    vb = cov_norm * (filt(b * b) - mu_b ** 2)
    cab = cov_norm * (filt(a * b) - mu_a * mu_b)
    s = ((2 * mu_a * mu_b + c1) * (2 * cab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    if a.shape[0] > 2 * pad and a.shape[1] > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return float(s.mean())


def mean_ssim(frames_a, frames_b, data_range=1.0):
    return float(np.mean([ssim(x, y, data_range) for x, y in zip(frames_a, frames_b)]))


def ssim_1d(x, y, window=7, data_range=1.0):
    """Structural similarity along time for ``(T, C)`` coefficient tracks, averaged over channels.

    Uses a uniform window of ``window`` frames with edge replication.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"ssim_1d shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 1:
        x, y = x[:, None], y[:, None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(z):
        return uniform_filter1d(z, window, axis=0, mode="nearest")

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx ** 2
    vy = filt(y * y) - my ** 2
    cxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


def _coeff_array(x):
    return x.to_array() if hasattr(x, "to_array") else np.asarray(x, dtype=np.float64)


def style_transfer_error(generated, truth):
    """(MAE, SSIM-1D) between two equally long coefficient sequences (arrays or motion chunks)."""
    g = _coeff_array(generated)
    t = _coeff_array(truth)
    if g.shape != t.shape:
        raise ShapeMismatchError(f"sequence shapes differ: {g.shape} vs {t.shape}")
    return float(np.mean(np.abs(g - t))), ssim_1d(g, t)


def diversity(keypoints):
    """Variance over time of ``(T, N, 3)`` keypoint positions, averaged over keypoints and axes."""
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.ndim != 3:
        raise ShapeMismatchError(f"diversity expects (T, N, 3) keypoints, got {kp.shape}")
    # centring on frame 0 first keeps a static track at exactly zero
    return float(np.mean(np.var(kp - kp[:1], axis=0)))
