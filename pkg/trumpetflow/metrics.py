"""
Evaluation Metrics and Estimators

Image quality (SNR, SSIM), posterior estimators from model samples
(MMSE and pixel-wise UQ), geometric distance oracles for the fiber-bundle
problems and per-coordinate normality statistics of recovered latents.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from trumpetflow.problems import MOBIUS_A, MOBIUS_B, MOBIUS_R, TORUS_R, TORUS_r

SSIM_WINDOW = 8
MOBIUS_BOUNDARY_SAMPLES = 2048


def snr_db(reference, estimate) -> float:
    """10 log10(|x|^2 / |x - x_hat|^2); +inf when the two are identical."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise ValueError(f"snr_db: shapes {reference.shape} and {estimate.shape} differ")
    error = float(np.sum((reference - estimate) ** 2))
    if error == 0.0:
        return float("inf")
    signal = float(np.sum(reference ** 2))
    if signal == 0.0:
        return float("-inf")
    return float(10.0 * np.log10(signal / error))


def _as_image(a: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        return a
    side = int(round(np.sqrt(a.size)))
    if a.ndim == 1 and side * side == a.size:
        return a.reshape(side, side)
    raise ValueError(f"ssim: expected a square image or its flattening, got shape {a.shape}")


def ssim(reference, estimate, window: int = SSIM_WINDOW) -> float:
    """
    Mean structural similarity over all valid window x window patches.

    L is the data range of the reference (1 when the reference is constant);
    C1 = (0.01 L)^2, C2 = (0.03 L)^2; local statistics use the sample covariance.
    """
    x = _as_image(np.asarray(reference, dtype=np.float64))
    y = _as_image(np.asarray(estimate, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if min(x.shape) < window:
        raise ValueError(f"ssim: image {x.shape} is smaller than the {window}x{window} window")
    data_range = float(x.max() - x.min()) or 1.0
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    px = sliding_window_view(x, (window, window)).reshape(-1, window * window)
    py = sliding_window_view(y, (window, window)).reshape(-1, window * window)
    mx, my = px.mean(axis=1), py.mean(axis=1)
    dx, dy = px - mx[:, None], py - my[:, None]
    norm = window * window - 1
    vx = np.sum(dx * dx, axis=1) / norm
    vy = np.sum(dy * dy, axis=1) / norm
    cxy = np.sum(dx * dy, axis=1) / norm
    value = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(value.mean())


def summarize_samples(samples) -> tuple:
    """
    MMSE and UQ from K posterior samples of shape (K, D).

    UQ is the square root of the mean squared deviation from the MMSE
    estimate (averaging before the root).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ValueError(f"need at least 2 posterior samples, got {samples.shape[0]}")
    mmse = samples.mean(axis=0)
    uq = np.sqrt(np.mean((samples - mmse) ** 2, axis=0))
    return mmse, uq


def posterior_samples(model, y, k: int, rng: np.random.Generator) -> np.ndarray:
    """K conditional samples f(z_k; y), z_k standard normal; returns (K, D)."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    return model.sample(np.repeat(y, k, axis=0), rng=rng)


def mmse_uq(model, y, k: int, rng: np.random.Generator) -> tuple:
    """(MMSE estimate, pixel-wise UQ) of the model posterior for one measurement."""
    if k < 2:
        raise ValueError(f"mmse_uq needs K >= 2, got {k}")
    return summarize_samples(posterior_samples(model, y, k, rng))


def pearson(a, b) -> float:
    """Pearson correlation; 0.0 when either input is constant."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.std() == 0.0 or b.std() == 0.0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def torus_distance(points, R: float = TORUS_R, r: float = TORUS_r) -> np.ndarray:
    """Euclidean distance of each point to the solid torus (0 inside)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ring = np.hypot(p[:, 0], p[:, 1])
    return np.maximum(np.hypot(ring - R, p[:, 2]) - r, 0.0)


def mobius_distance(points, R: float = MOBIUS_R, a: float = MOBIUS_A, b: float = MOBIUS_B,
                    boundary_samples: int = MOBIUS_BOUNDARY_SAMPLES) -> np.ndarray:
    """
    Distance of each point to the solid elliptic Moebius band, measured in the
    point's own meridian plane (0 inside).

    The in-plane offset from the core circle is rotated back by t/2 and
    compared with the axis-aligned ellipse (a, b); points outside get their
    distance to a dense sampling of the ellipse boundary. In-plane distance
    is never smaller than the true 3-D distance.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    t = np.arctan2(p[:, 1], p[:, 0])
    u = np.hypot(p[:, 0], p[:, 1]) - R
    w = p[:, 2]
    c, s = np.cos(-t / 2.0), np.sin(-t / 2.0)
    u_rot = c * u - s * w
    w_rot = s * u + c * w
    inside = (u_rot / a) ** 2 + (w_rot / b) ** 2 <= 1.0
    theta = np.linspace(0.0, 2.0 * np.pi, boundary_samples, endpoint=False)
    boundary = np.stack([a * np.cos(theta), b * np.sin(theta)], axis=-1)
    offsets = np.stack([u_rot, w_rot], axis=-1)
    dist = np.zeros(len(p))
    for start in range(0, len(p), 1024):
        chunk = offsets[start:start + 1024]
        dist[start:start + 1024] = np.min(np.linalg.norm(chunk[:, None, :] - boundary[None, :, :], axis=-1), axis=1)
    return np.where(inside, 0.0, dist)


def ks_statistics(latents) -> np.ndarray:
    """Kolmogorov-Smirnov statistic of each latent coordinate against N(0, 1)."""
    latents = np.asarray(latents, dtype=np.float64)
    latents = latents.reshape(latents.shape[0], -1)
    return np.array([stats.kstest(latents[:, j], "norm").statistic for j in range(latents.shape[1])])
