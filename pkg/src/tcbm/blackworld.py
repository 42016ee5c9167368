"""Closed-form Black-world (deterministic total variance) reference prices.

Conditional on the clock, the log-forward is a drifted Brownian motion, so
deterministic-clock barrier prices have method-of-images closed forms. These
serve as independent oracles for the transform-integral pricers and as the
conditional building block inside tests.

All functions work in forward units with total variance g = sigma^2 * T and
return undiscounted values unless a discount factor is supplied explicitly.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import norm

from .errors import DomainError

BETA = -0.5


def black_call(F: float, K: float, g: float) -> float:
    """Undiscounted Black call on a forward with total variance g."""
    if g <= 0:
        return max(F - K, 0.0)
    s = math.sqrt(g)
    d1 = math.log(F / K) / s + 0.5 * s
    return F * norm.cdf(d1) - K * norm.cdf(d1 - s)


def black_put(F: float, K: float, g: float) -> float:
    if g <= 0:
        return max(K - F, 0.0)
    s = math.sqrt(g)
    d1 = math.log(F / K) / s + 0.5 * s
    return K * norm.cdf(s - d1) - F * norm.cdf(-d1)


def _tail_call(y: float, m: float, g: float) -> float:
    """E[(e^Y - K)+ ... ] helpers: E[e^Y 1{Y>m}] and P(Y>m) for Y~N(y-g/2, g)."""
    s = math.sqrt(g)
    d = (y - m) / s
    return math.exp(y) * norm.cdf(d + 0.5 * s), norm.cdf(d - 0.5 * s)


def uop_black(F0: float, K: float, H: float, g: float) -> float:
    """Up-and-out put, continuous monitoring, via the image kernel."""
    if F0 >= H:
        return 0.0
    x0, h = math.log(F0), math.log(H)
    m = min(math.log(K), h)
    s = math.sqrt(g)

    def put_piece(y: float) -> float:
        # E[(K - e^Y) 1{Y < m}] for Y ~ N(y - g/2, g)
        d = (m - y) / s
        return K * norm.cdf(d + 0.5 * s) - math.exp(y) * norm.cdf(d - 0.5 * s)

    mirror = 2.0 * h - x0
    return put_piece(x0) - math.exp(2.0 * BETA * (h - x0)) * put_piece(mirror)


def doc_black(F0: float, K: float, L: float, g: float) -> float:
    """Down-and-out call, continuous monitoring, via the image kernel."""
    if F0 <= L:
        return 0.0
    x0, l = math.log(F0), math.log(L)
    m = max(math.log(K), l)
    s = math.sqrt(g)

    def call_piece(y: float) -> float:
        # E[(e^Y - K) 1{Y > m}] for Y ~ N(y - g/2, g)
        d = (y - m) / s
        return math.exp(y) * norm.cdf(d + 0.5 * s) - K * norm.cdf(d - 0.5 * s)

    mirror = 2.0 * l - x0
    return call_piece(x0) - math.exp(2.0 * BETA * (l - x0)) * call_piece(mirror)


def dko_black(F0: float, K: float, L: float, H: float, g: float,
              put: bool = False, n_images: int = 64) -> float:
    """Double knock-out call/put by the doubly-reflected image kernel.

    Independent of the corridor sine series (different expansion of the same
    Dirichlet heat kernel), hence usable as its oracle. Each image source at
    center c contributes exp(BETA*(c - x0)) * E[payoff(Z)] with
    Z ~ N(c + BETA*g, g), restricted to the payoff slab inside the corridor.
    """
    if not L < F0 < H:
        return 0.0
    x0, l, h = math.log(F0), math.log(L), math.log(H)
    a = h - l
    s = math.sqrt(g)

    if put:
        lo, hi = l, min(math.log(K), h)
    else:
        lo, hi = max(math.log(K), l), h
    if hi <= lo:
        return 0.0

    def slab_value(c: float) -> float:
        # E[(e^Z - K) 1{lo < Z < hi}] for Z ~ N(c - g/2, g); put flips the sign
        dlo = (c - lo) / s
        dhi = (c - hi) / s
        if dhi > 14.0 or dlo < -14.0:
            return 0.0  # slab mass below double precision; avoids exp overflow
        e_term = math.exp(c) * (norm.cdf(dlo + 0.5 * s) - norm.cdf(dhi + 0.5 * s))
        p_term = norm.cdf(dlo - 0.5 * s) - norm.cdf(dhi - 0.5 * s)
        return (K * p_term - e_term) if put else (e_term - K * p_term)

    terms = []
    for n in range(-n_images, n_images + 1):
        c1 = x0 - 2.0 * n * a
        c2 = (2.0 * l - x0) - 2.0 * n * a
        terms.append(math.exp(BETA * (c1 - x0)) * slab_value(c1))
        terms.append(-math.exp(BETA * (c2 - x0)) * slab_value(c2))
    return float(np.sum(sorted(terms, key=abs)))
