"""Independent reference computations used only by the test suite.

These deliberately avoid the engine's own quadrature/series paths: brute-force
x-space integration against image kernels, and a plain Brownian corridor
Monte Carlo for the double-barrier case.
"""

import numpy as np
from scipy.integrate import quad
from scipy.stats import norm

BETA = -0.5


def image_killed_density(x, x0, h, g, beta=BETA):
    """Killed transition density below an upper barrier (method of images)."""
    def p(y, z):
        return np.exp(-(z - y - beta * g) ** 2 / (2 * g)) / np.sqrt(2 * np.pi * g)
    return p(x0, x) - np.exp(2 * beta * (h - x0)) * p(2 * h - x0, x)


def integrated_image_cdf(x, x0, h, g, beta=BETA):
    """Joint CDF Q(X <= x, max < h) by direct quadrature of the image density."""
    lo = min(x, x0) - 14 * np.sqrt(g) - abs(beta) * g - 1.0
    val, _ = quad(lambda y: image_killed_density(y, x0, h, g, beta), lo, x,
                  limit=400, epsabs=1e-14)
    return val


def brownian_corridor_mc(x0, l, h, g, payoff, n_paths=1_000_000, n_steps=64,
                         seed=1234):
    """Drifted Brownian corridor survival payoff with per-step bridge kills.

    Returns (estimate, standard_error) of E[payoff(X_g) 1{l < X < h on [0,g]}].
    """
    rng = np.random.default_rng(seed)
    dt = g / n_steps
    x = np.full(n_paths, x0)
    alive = np.ones(n_paths, dtype=bool)
    for _ in range(n_steps):
        x_new = x + BETA * dt + np.sqrt(dt) * rng.standard_normal(n_paths)
        up = np.exp(-2.0 * np.maximum(h - x, 0) * np.maximum(h - x_new, 0) / dt)
        dn = np.exp(-2.0 * np.maximum(x - l, 0) * np.maximum(x_new - l, 0) / dt)
        u1 = rng.random(n_paths)
        u2 = rng.random(n_paths)
        crossed = (x_new >= h) | (x_new <= l) | (u1 < up) | (u2 < dn)
        alive &= ~crossed
        x = x_new
    vals = np.where(alive, payoff(x), 0.0)
    return vals.mean(), vals.std() / np.sqrt(n_paths)
