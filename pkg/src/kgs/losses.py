"""Training objective terms and image metrics.

The photometric loss mixes mean absolute error with structural dissimilarity
(11x11 Gaussian window, sigma 1.5, unit dynamic range, zero-padded 'same'
convolutions, channels averaged). Offset and anisotropy regularizers keep
static regions still and splat aspect ratios bounded. Every term has an
exact analytic backward, validated against central differences in the tests.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

from .gaussians import InvalidInputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CLAMP_DB = 99.0


def _window1d():
    half = (SSIM_WINDOW - 1) / 2.0
    x = np.arange(SSIM_WINDOW) - half
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


_W1D = _window1d()


def _blur(img2d):
    out = convolve1d(img2d, _W1D, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, _W1D, axis=1, mode="constant", cval=0.0)


def ssim(a, b):
    """Mean structural similarity of two HxWxC images in [0,1].

    Returns (value, cache); the cache feeds ssim_backward for d/da.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    caches = []
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mu_x, mu_y = _blur(x), _blur(y)
        xx, yy, xy = _blur(x * x), _blur(y * y), _blur(x * y)
        var_x = xx - mu_x**2
        var_y = yy - mu_y**2
        cov = xy - mu_x * mu_y
        a1 = 2 * mu_x * mu_y + SSIM_C1
        a2 = 2 * cov + SSIM_C2
        b1 = mu_x**2 + mu_y**2 + SSIM_C1
        b2 = var_x + var_y + SSIM_C2
        smap = (a1 * a2) / (b1 * b2)
        vals.append(smap.mean())
        caches.append((x, y, mu_x, mu_y, a1, a2, b1, b2))
    return float(np.mean(vals)), caches


def ssim_backward(caches, d_value=1.0):
    """Gradient of ssim(a, b) with respect to the first image."""
    n_ch = len(caches)
    grads = []
    for (x, y, mu_x, mu_y, a1, a2, b1, b2) in caches:
        scale = d_value / (n_ch * x.size)
        denom = b1 * b2
        d_a1 = scale * a2 / denom
        d_a2 = scale * a1 / denom
        d_b1 = -scale * a1 * a2 / (b1 * denom)
        d_b2 = -scale * a1 * a2 / (b2 * denom)
        # a1, b1 depend on mu_x; a2 on cov; b2 on var_x
        d_mu = 2 * mu_y * d_a1 + 2 * mu_x * d_b1
        d_cov = 2 * d_a2
        d_var = d_b2
        # var_x = blur(x^2) - mu_x^2, cov = blur(x*y) - mu_x*mu_y
        d_xx = d_var
        d_xy = d_cov
        d_mu = d_mu - 2 * mu_x * d_var - mu_y * d_cov
        # adjoint of the zero-padded separable blur is the same blur
        d_x = _blur(d_mu) + _blur(d_xx) * 2 * x + _blur(d_xy) * y
        grads.append(d_x)
    return np.stack(grads, axis=-1)


def image_loss(img, gt, lambda_dssim=0.2):
    """(1-l)*mean|I-I_gt| + l*(1-SSIM). Returns (value, cache)."""
    img = np.asarray(img, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if img.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {img.shape} vs {gt.shape}")
    diff = img - gt
    l1 = np.mean(np.abs(diff))
    if lambda_dssim > 0.0:
        s, s_cache = ssim(img, gt)
    else:
        s, s_cache = 1.0, None
    value = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s)
    return float(value), (diff, s_cache, lambda_dssim)


def image_loss_backward(cache, d_value=1.0):
    diff, s_cache, lambda_dssim = cache
    g = d_value * (1.0 - lambda_dssim) * np.sign(diff) / diff.size
    if s_cache is not None:
        g = g + ssim_backward(s_cache, -d_value * lambda_dssim)
    return g


def psnr(img, gt):
    """10*log10(1/MSE) on unit range, clamped to 99 dB."""
    img = np.asarray(img, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if img.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {img.shape} vs {gt.shape}")
    mse = np.mean((img - gt) ** 2)
    if mse <= 0.0:
        return PSNR_CLAMP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CLAMP_DB))


def reg_loss(dx, dynamic_mask):
    """Mean offset norm over the static set plus mean over the dynamic set."""
    dx = np.asarray(dx, dtype=float)
    norms = np.linalg.norm(dx, axis=1)
    value = 0.0
    for mask in (~dynamic_mask, dynamic_mask):
        if mask.any():
            value += norms[mask].mean()
    return float(value)


def reg_loss_backward(dx, dynamic_mask, d_value=1.0):
    dx = np.asarray(dx, dtype=float)
    norms = np.linalg.norm(dx, axis=1)
    grad = np.zeros_like(dx)
    for mask in (~dynamic_mask, dynamic_mask):
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        safe = np.where(norms > 0, norms, 1.0)
        rows = mask & (norms > 0)
        grad[rows] = (d_value / cnt) * dx[rows] / safe[rows, None]
    return grad


def ani_loss(scales, eps_ani=1e-6):
    """Mean aspect ratio max(s)/(min(s)+eps) over splats."""
    scales = np.asarray(scales, dtype=float)
    if np.any(scales <= 0):
        raise InvalidInputError("scales must be positive")
    return float(np.mean(scales.max(axis=1) / (scales.min(axis=1) + eps_ani)))


def ani_loss_backward(scales, eps_ani=1e-6, d_value=1.0):
    scales = np.asarray(scales, dtype=float)
    n = scales.shape[0]
    i_max = scales.argmax(axis=1)
    i_min = scales.argmin(axis=1)
    smax = scales[np.arange(n), i_max]
    smin = scales[np.arange(n), i_min]
    grad = np.zeros_like(scales)
    denom = smin + eps_ani
    same = i_max == i_min
    grad[np.arange(n), i_max] += d_value / (n * denom)
    grad[np.arange(n), i_min] -= d_value * smax / (n * denom**2)
    if same.any():
        # isotropic splat: ratio is s/(s+eps), one combined derivative
        rows = np.where(same)[0]
        grad[rows, i_max[rows]] = d_value * eps_ani / (n * denom[rows] ** 2)
    return grad
