"""Independent reference implementations the tests compare against."""

import numpy as np
from scipy import stats

from robokeys.controller import posterior_update
from robokeys.scenegen import DirichletState

EPS = 1e-3


def simplex_grid(n):
    """Cell midpoints of a regular triangulation of the 2-simplex, with cell area."""
    h = 1.0 / n
    pts = []
    for i in range(n):
        for j in range(n - i):
            # upward triangle centroid
            pts.append(((i + 1 / 3) * h, (j + 1 / 3) * h))
            if i + j < n - 1:
                pts.append(((i + 2 / 3) * h, (j + 2 / 3) * h))
    p = np.array(pts)
    return np.column_stack([p, 1 - p.sum(axis=1)]), 0.5 * h * h


def grid_posterior_l1(theta, counts, n=400):
    """L1 distance between the closed-form posterior and numeric prior x likelihood."""
    p, area = simplex_grid(n)
    unnorm = stats.dirichlet.pdf(p.T, theta) * np.prod(p ** counts, axis=1)
    numeric = unnorm / (unnorm.sum() * area)
    post = posterior_update(DirichletState(0, theta), counts, gamma=1.0)
    closed = stats.dirichlet.pdf(p.T, post.concentration)
    return np.sum(np.abs(numeric - closed)) * area


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8))


def numeric_grad(f, x, eps=EPS):
    """Central differences of scalar ``f`` with respect to every entry of ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def kink_free_params(params, rng):
    """Re-draw ``params`` in place so no ReLU input sits near zero.

    Central differences with a 1e-3 step are wrong wherever a ReLU switches
    inside the step. Small weights with per-channel biases of +-0.3..0.8 keep
    every pre-activation well clear of zero; negative-bias channels are dead
    and still exercise the ReLU mask.
    """
    for k, w in params.weights.items():
        if k.endswith(".b"):
            w[:] = rng.choice([-1.0, 1.0], w.size) * rng.uniform(0.3, 0.8, w.size)
        else:
            w *= 0.2
    return params


def naive_conv(x, w, b):
    """Direct 3x3 same convolution over an NHWC tensor."""
    B, H, W, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((B, H, W, w.shape[-1]))
    for dy in range(3):
        for dx in range(3):
            out += xp[:, dy : dy + H, dx : dx + W, :] @ w[dy, dx]
    return out + b


def brute_force_peak(plane, window, threshold):
    """Loop over every pixel and its clipped neighbourhood."""
    h, w = plane.shape
    r = window // 2
    best = None
    for v in range(h):
        for u in range(w):
            val = plane[v, u]
            if val < threshold:
                continue
            hood = plane[max(v - r, 0) : v + r + 1, max(u - r, 0) : u + r + 1]
            if val < hood.max():
                continue
            if best is None or val > best[1]:
                best = ((u, v), float(val))
    return best
