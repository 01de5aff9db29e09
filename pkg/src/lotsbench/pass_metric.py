"""Perceptual adversarial similarity score.

PASS(x_p, x_o) is the SSIM between ``x_o`` and ``x_p`` after ``x_p`` has been
aligned onto ``x_o`` with an ECC-maximising homography.  Both images are
converted to grayscale first.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

LUMA = np.array([0.299, 0.587, 0.114])
IDENTITY = np.eye(3)


@dataclass
class PassScore:
    value: float
    aligned: bool
    homography: np.ndarray


@dataclass
class Alignment:
    homography: np.ndarray
    warped: np.ndarray
    converged: bool
    iterations: int
    correlation: float


def to_grayscale(image) -> np.ndarray:
    """Single-channel float image from an (H, W), (H, W, 1) or (H, W, 3) array."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        return x.copy()
    if x.ndim == 3 and x.shape[2] == 1:
        return x[..., 0].copy()
    if x.ndim == 3 and x.shape[2] == 3:
        return x @ LUMA
    raise ValueError(f"expected a 1- or 3-channel image, got shape {x.shape}")


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, window=None, data_range=255.0) -> np.ndarray:
    """SSIM over every fully contained window position (no padding)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    window = gaussian_window() if window is None else window
    if a.shape != b.shape:
        raise ValueError(f"images differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[0] < window.shape[0] or a.shape[1] < window.shape[1]:
        raise ValueError(f"SSIM needs 2-D images of at least {window.shape}, got {a.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(x):
        return signal.correlate2d(x, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


# ---------------------------------------------------------------------------
# ECC alignment
# ---------------------------------------------------------------------------


def params_to_homography(p) -> np.ndarray:
    """Parameters ``(h00-1, h01, h02, h10, h11-1, h12, h20, h21)`` to a 3x3 matrix."""
    p = np.asarray(p, dtype=np.float64)
    return np.array([[1 + p[0], p[1], p[2]],
                     [p[3], 1 + p[4], p[5]],
                     [p[6], p[7], 1.0]])


def homography_to_params(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64) / h[2, 2]
    return np.array([h[0, 0] - 1, h[0, 1], h[0, 2], h[1, 0], h[1, 1] - 1, h[1, 2], h[2, 0], h[2, 1]])


def apply_homography(h, xs, ys):
    """Map pixel coordinates (x = column, y = row) through ``h``."""
    d = h[2, 0] * xs + h[2, 1] * ys + h[2, 2]
    return (h[0, 0] * xs + h[0, 1] * ys + h[0, 2]) / d, (h[1, 0] * xs + h[1, 1] * ys + h[1, 2]) / d, d


def warp_image(moving, h, fill=None):
    """Sample ``moving`` at ``h`` applied to every pixel of the output grid.

    Bilinear interpolation.  Output pixels that map outside ``moving`` take
    the value of ``fill`` at the same position (or the nearest moving pixel
    when ``fill`` is None).  Returns ``(warped, inside_mask)``.
    """
    moving = np.asarray(moving, dtype=np.float64)
    rows, cols = moving.shape
    ys, xs = np.mgrid[:rows, :cols].astype(np.float64)
    wx, wy, _ = apply_homography(h, xs, ys)
    inside = (wx >= 0) & (wx <= cols - 1) & (wy >= 0) & (wy <= rows - 1)
    warped = ndimage.map_coordinates(moving, [wy, wx], order=1, mode="nearest")
    if fill is not None:
        warped = np.where(inside, warped, fill)
    return warped, inside


def _homography_jacobian(h, xs, ys, gx, gy):
    """d(warped intensity)/d(params), one row per pixel."""
    wx, wy, d = apply_homography(h, xs, ys)
    gxd, gyd = gx / d, gy / d
    return np.stack([
        gxd * xs, gxd * ys, gxd,
        gyd * xs, gyd * ys, gyd,
        -(gxd * wx + gyd * wy) * xs,
        -(gxd * wx + gyd * wy) * ys,
    ], axis=-1)


def _zero_mean(v):
    return v - v.mean()


def ecc_align(moving, fixed, max_iters=100, eps=0.01, initial=None) -> Alignment:
    """Align ``moving`` onto ``fixed`` by maximising the enhanced correlation coefficient.

    Forward-additive Gauss-Newton over the 8 homography parameters.  Stops when
    the parameter update norm drops below ``eps`` (converged) or after
    ``max_iters`` updates.  The homography with the highest correlation seen
    is returned.  Zero-variance inputs fall back to the identity with
    ``converged=False``.
    """
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape or moving.ndim != 2:
        raise ValueError(f"ecc_align needs two 2-D images of equal shape, got {moving.shape} and {fixed.shape}")
    identity = IDENTITY.copy()
    if np.ptp(moving) == 0 or np.ptp(fixed) == 0:
        return Alignment(identity, moving.copy(), False, 0, 0.0)
    if np.array_equal(moving, fixed) and initial is None:
        return Alignment(identity, moving.copy(), True, 0, 1.0)

    rows, cols = fixed.shape
    ys, xs = np.mgrid[:rows, :cols].astype(np.float64)
    gy_img, gx_img = np.gradient(moving)
    p = homography_to_params(IDENTITY if initial is None else initial)

    best = (-np.inf, params_to_homography(p))
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        h = params_to_homography(p)
        warped, inside = warp_image(moving, h)
        if inside.sum() < 9:
            break
        gx, _ = warp_image(gx_img, h)
        gy, _ = warp_image(gy_img, h)
        tmpl = _zero_mean(fixed[inside])
        img = _zero_mean(warped[inside])
        tn, iN = np.linalg.norm(tmpl), np.linalg.norm(img)
        if tn == 0 or iN == 0:
            break
        rho = float(tmpl @ img / (tn * iN))
        if rho > best[0]:
            best = (rho, h)
        jac = _homography_jacobian(h, xs[inside], ys[inside], gx[inside], gy[inside])
        jac = jac - jac.mean(axis=0)
        hess = jac.T @ jac
        proj_i = jac.T @ img
        proj_t = jac.T @ tmpl
        try:
            hinv_i = np.linalg.solve(hess, proj_i)
        except np.linalg.LinAlgError:
            break
        lam_num = iN ** 2 - proj_i @ hinv_i
        lam_den = tmpl @ img - proj_t @ hinv_i
        if not lam_den > 0:
            break
        lam = lam_num / lam_den
        err = lam * tmpl - img
        delta = np.linalg.solve(hess, jac.T @ err)
        if not np.all(np.isfinite(delta)):
            break
        p = p + delta
        if abs(np.linalg.det(params_to_homography(p))) < 1e-12:
            break
        if np.linalg.norm(delta) < eps:
            converged = True
            break

    # correlation at the final parameters
    h = params_to_homography(p)
    if abs(np.linalg.det(h)) >= 1e-12:
        warped, inside = warp_image(moving, h)
        if inside.sum() >= 9:
            tmpl = _zero_mean(fixed[inside])
            img = _zero_mean(warped[inside])
            denom = np.linalg.norm(tmpl) * np.linalg.norm(img)
            if denom > 0:
                rho = float(tmpl @ img / denom)
                if rho >= best[0]:
                    best = (rho, h)
    rho, h = best
    if not np.isfinite(rho):
        return Alignment(identity, moving.copy(), False, it, 0.0)
    warped, _ = warp_image(moving, h, fill=fixed)
    return Alignment(h, warped, converged, it, rho)


def pass_score(x_p, x_o, max_iters=100, eps=0.01) -> PassScore:
    a = to_grayscale(x_p)
    b = to_grayscale(x_o)
    if a.shape != b.shape:
        raise ValueError(f"images differ in shape: {np.shape(x_p)} vs {np.shape(x_o)}")
    al = ecc_align(a, b, max_iters=max_iters, eps=eps)
    return PassScore(ssim(al.warped, b), al.converged, al.homography)
