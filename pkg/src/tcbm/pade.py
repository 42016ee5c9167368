"""Rational (Pade) resummation of the correlation expansion.

A truncated power series sum C_n rho^n is accurate only for small |rho|;
[L/M] Pade approximants extend the usable range. The denominator
coefficients solve the M x M Hankel-structured linear system

    sum_{m=1..M} b_m C_{L+j-m} = -C_{L+j},    j = 1..M,

the numerator follows by forward substitution, and poles are the denominator
roots. A pole-proximity monitor (distance from any pole to the real interval
[-1, 1]) plus structural value bounds drive the Taylor fallback policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateSystemError, DomainError

Array = np.ndarray


def taylor_eval(coeffs: Sequence[float], rho: float,
                return_partials: bool = False):
    """Horner evaluation of sum C_n rho^n; optionally the partial-sum ladder
    (one entry per truncation order) for oscillation diagnostics."""
    c = np.asarray(coeffs, dtype=float)
    if c.ndim != 1 or c.size == 0:
        raise DomainError("need a non-empty coefficient vector")
    if return_partials:
        powers = rho ** np.arange(c.size)
        partials = np.cumsum(c * powers)
        return float(partials[-1]), partials
    result = 0.0
    for cn in c[::-1]:
        result = result * rho + cn
    return float(result)


def _interval_distance(z: complex, lo: float = -1.0, hi: float = 1.0) -> float:
    """Distance from a complex point to the real segment [lo, hi]."""
    x, y = z.real, z.imag
    dx = max(lo - x, 0.0, x - hi)
    return float(np.hypot(dx, y))


@dataclass(frozen=True)
class PadeApproximant:
    """[L/M] rational approximant with pole diagnostics."""

    L: int
    M: int
    numerator: Array      # a_0 .. a_L
    denominator: Array    # 1, b_1 .. b_M
    poles: Array          # complex roots of the denominator
    pole_proximity: float  # min distance from any pole to [-1, 1]

    def __call__(self, rho: float) -> float:
        num = np.polyval(self.numerator[::-1], rho)
        den = np.polyval(self.denominator[::-1], rho)
        return float(num / den)

    def taylor_reexpansion(self, order: int) -> Array:
        """Series coefficients of the rational function through `order`."""
        a = self.numerator
        b = self.denominator
        c = np.zeros(order + 1)
        for n in range(order + 1):
            acc = a[n] if n < len(a) else 0.0
            for m in range(1, min(n, len(b) - 1) + 1):
                acc -= b[m] * c[n - m]
            c[n] = acc
        return c


def pade_fit(coeffs: Sequence[float], L: int, M: int,
             cond_limit: float = 1e12) -> PadeApproximant:
    """Fit the [L/M] approximant to series coefficients C_0..C_N, L+M <= N."""
    c = np.asarray(coeffs, dtype=float)
    if L < 0 or M < 0:
        raise DomainError("orders must be nonnegative")
    if L + M > c.size - 1:
        raise DomainError(f"[{L}/{M}] needs at least {L + M + 1} coefficients")

    if M == 0:
        b_full = np.array([1.0])
    else:
        A = np.zeros((M, M))
        rhs = np.zeros(M)
        for j in range(1, M + 1):
            for m in range(1, M + 1):
                idx = L + j - m
                A[j - 1, m - 1] = c[idx] if idx >= 0 else 0.0
            rhs[j - 1] = -c[L + j]
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > cond_limit:
            raise DegenerateSystemError(
                f"[{L}/{M}] denominator system condition {cond:.2e} exceeds "
                f"{cond_limit:.0e}; use a lower order")
        b = np.linalg.solve(A, rhs)
        b_full = np.concatenate([[1.0], b])

    a = np.array([
        sum(b_full[m] * c[n - m] for m in range(0, min(n, M) + 1))
        for n in range(L + 1)
    ])
    if M > 0:
        poles = np.atleast_1d(np.roots(b_full[::-1]))
        proximity = float(min((_interval_distance(complex(p)) for p in poles),
                              default=np.inf))
    else:
        poles = np.array([], dtype=complex)
        proximity = np.inf
    return PadeApproximant(L=L, M=M, numerator=a, denominator=b_full,
                           poles=poles, pole_proximity=proximity)


@dataclass(frozen=True)
class FallbackPolicy:
    """Order preferences and safety bounds for rational evaluation."""

    pole_threshold: float = 0.2
    orders: tuple = ((3, 2), (2, 2), (2, 1), (1, 1))
    require_nonnegative: bool = True
    survival_bounds: bool = False   # clamp candidates to [0, 1] checks


def evaluate_with_fallback(coeffs: Sequence[float], rho: float,
                           policy: Optional[FallbackPolicy] = None) -> tuple:
    """Evaluate the expansion at rho, preferring the highest-order healthy Pade.

    A Pade candidate is healthy when its fit succeeds, every pole keeps at
    least policy.pole_threshold distance from [-1, 1], and the value obeys the
    structural bounds. Otherwise lower orders are tried, then plain Taylor.
    Returns (value, route_label).
    """
    policy = policy or FallbackPolicy()
    c = np.asarray(coeffs, dtype=float)
    if rho == 0.0:
        return float(c[0]), "taylor-degenerate"
    n_avail = c.size - 1

    def healthy(value: float) -> bool:
        if policy.require_nonnegative and value < 0.0:
            return False
        if policy.survival_bounds and not 0.0 <= value <= 1.0:
            return False
        return True

    for (L, M) in policy.orders:
        if L + M > n_avail:
            continue
        try:
            approx = pade_fit(c, L, M)
        except DegenerateSystemError:
            continue
        if approx.pole_proximity <= policy.pole_threshold:
            continue
        value = approx(rho)
        if healthy(value):
            return value, f"pade[{L}/{M}]"
    return taylor_eval(c, rho), "taylor"
