"""Shared oracles for the test-suite."""
import math

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from lotsbench import nn
from lotsbench.nn import Pool2D, ReLU
from lotsbench.pass_metric import apply_homography

FD_STEP = 1e-3  # on the [0, 1] input scale


def small_net(seed=0, input_shape=(8, 8, 1), num_classes=4, pooling="avg"):
    """A tiny conv net, cheap enough for finite differences."""
    return nn.default_architecture(input_shape, num_classes, channels=(2, 3), hidden=6, pooling=pooling, seed=seed)


def activation_pattern(net, image):
    """ReLU on/off masks and max-pool winners: the piece of the piecewise-linear net we are on."""
    fp = net.forward(image)
    pattern = []
    for layer, inp, cache in zip(net.layers, fp.inputs, fp.caches):
        if isinstance(layer, ReLU):
            pattern.append(inp > 0)
        elif isinstance(layer, Pool2D) and layer.mode == "max":
            pattern.append(cache)
    return pattern


def _same(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def central_differences(net, image, scalar_fn, h=FD_STEP):
    """Central differences of ``scalar_fn(logits)`` per pixel, in pixel-level units.

    Returns ``(gradient, smooth)`` where ``smooth`` marks pixels whose
    +-h stencil stays on one linear piece of the network.  Across a ReLU or
    max-pool switch a difference quotient is not a derivative estimate.
    """
    s = net.pixel_scale
    x = np.asarray(image, dtype=np.float64) / s
    base = activation_pattern(net, x * s)
    grad = np.zeros_like(x)
    smooth = np.ones(x.shape, dtype=bool)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (scalar_fn(net.logits(xp * s)) - scalar_fn(net.logits(xm * s))) / (2 * h)
        smooth[idx] = _same(base, activation_pattern(net, xp * s)) and _same(base, activation_pattern(net, xm * s))
    return grad / s, smooth


def max_rel_err(analytic, numeric, mask=None):
    if mask is not None:
        analytic, numeric = analytic[mask], numeric[mask]
    return float(np.abs(analytic - numeric).max() / np.abs(numeric).max())


def brute_force_ssim(a, b, size=11, sigma=1.5, data_range=255.0):
    """Per-window SSIM, one window at a time, with plain loops over positions."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    rows, cols = a.shape[0] - size + 1, a.shape[1] - size + 1
    total = 0.0
    for i in range(rows):
        for j in range(cols):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            ma, mb = np.sum(w * pa), np.sum(w * pb)
            va = np.sum(w * (pa - ma) ** 2)
            vb = np.sum(w * (pb - mb) ** 2)
            cov = np.sum(w * (pa - ma) * (pb - mb))
            total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    return total / (rows * cols)


def smooth_field(xs, ys):
    """An analytic smooth test image with structure in every direction, values in [0, 255]."""
    v = (np.sin(xs / 5.0) * np.cos(ys / 7.0) + 0.6 * np.exp(-((xs - 30) ** 2 + (ys - 22) ** 2) / 120.0)
         + 0.4 * np.sin((xs + ys) / 9.0))
    return 127.5 + 60.0 * v


def rendered(h, size=64):
    """Image whose pixel x shows the smooth field at h^-1(x), so warping by h recovers the field."""
    ys, xs = np.mgrid[:size, :size].astype(float)
    wx, wy, _ = apply_homography(np.linalg.inv(h), xs, ys)
    return smooth_field(wx, wy)


def max_displacement_error(h_est, h_true, size=64):
    ys, xs = np.mgrid[:size, :size].astype(float)
    ax, ay, _ = apply_homography(h_est, xs, ys)
    bx, by, _ = apply_homography(h_true, xs, ys)
    return float(np.hypot(ax - bx, ay - by).max())


def rotation_about_centre(deg, size=64, tx=0.0, ty=0.0):
    c = (size - 1) / 2
    t = math.radians(deg)
    r = np.array([[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0], [0, 0, 1]])
    move = np.array([[1, 0, c + tx], [0, 1, c + ty], [0, 0, 1.0]])
    back = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    return move @ r @ back


def isotropic_far_points(model, max_distance, rng, trials=200, factor=10.0):
    """AVs in uniformly random directions around the MAV centroid, at least
    ``factor * max_distance`` away from every MAV."""
    mus = np.stack([model.mavs.means[c] for c in model.mavs.classes()])
    centre = mus.mean(axis=0)
    radius = factor * max_distance + np.linalg.norm(mus - centre, axis=1).max()
    u = rng.normal(size=(trials, len(centre)))
    avs = centre + radius * u / np.linalg.norm(u, axis=1, keepdims=True)
    gaps = np.linalg.norm(avs[:, None, :] - mus[None], axis=2)
    assert gaps.min() >= factor * max_distance
    return avs


def hand_t(a, b):
    d = [x - y for x, y in zip(a, b)]
    n = len(d)
    mean = math.fsum(d) / n
    sd = math.sqrt(math.fsum((x - mean) ** 2 for x in d) / (n - 1))
    return mean / (sd / math.sqrt(n))


def quad_two_sided(t, df):
    """2 * integral of the Student t density from |t| to infinity."""
    log_c = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * math.log(df * math.pi)
    density = lambda x: math.exp(log_c - (df + 1) / 2 * math.log1p(x * x / df))
    tail, _ = integrate.quad(density, abs(t), np.inf, epsabs=1e-14, epsrel=1e-12)
    return 2 * tail
