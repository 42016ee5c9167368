"""Fourier-cosine vanilla pricing, implied vols and variance-swap analytics.

Conditional on the terminal clock the log-forward is Gaussian, so the
characteristic function of X_T = log F_T is

    char(u) = e^{i u x0} * Phi_T(u^2/2 - i beta u),   beta = -1/2,

which for the martingale normalization simplifies the Laplace argument to
u(u + i)/2. Vanillas are priced by the cosine expansion on a cumulant-sized
interval; puts are priced directly (bounded payoff) and calls recovered by
parity. Variance-swap strikes are annualized expected integrated variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq
from scipy.stats import norm

from .barrier import BETA, MarketEnv
from .clocks import (CirClock, ClockSpec, MarkovSwitchingClock, SquaredOuClock,
                     TimeDepCirClock, TwoFactorCirClock, cir_AB_closed_form,
                     _solve_riccati_segments, _cir_segments_for, log_phi,
                     mean_activity, sqou_AB_closed_form)
from .errors import DomainError, ConvergenceError, UnsupportedFamilyError

Array = np.ndarray


@dataclass(frozen=True)
class VanillaQuote:
    """One vanilla quote: price or implied vol, with a calibration weight."""

    maturity: float
    strike: float
    kind: str = "call"                 # "call" | "put"
    price: Optional[float] = None
    implied_vol: Optional[float] = None
    weight: float = 1.0

    def __post_init__(self):
        if self.maturity <= 0 or self.strike <= 0:
            raise DomainError("quote needs positive strike and maturity")
        if self.kind not in ("call", "put"):
            raise DomainError("kind must be 'call' or 'put'")
        if self.weight < 0:
            raise DomainError("weight must be >= 0")


# --------------------------------------------------------------------------- #
# Characteristic function with complex Laplace continuation
# --------------------------------------------------------------------------- #

def _log_phi_complex(spec: ClockSpec, T: float, lam: Array) -> Array:
    """log Phi at complex Laplace arguments with Re(lam) >= 0.

    CIR-type specs continue the closed form (principal branch, then a
    continuous-argument correction applied by the caller along sweeps);
    ODE families integrate the complex Riccati system; the Markov family
    exponentiates Q - lam D directly.
    """
    lam = np.asarray(lam, dtype=complex)
    if isinstance(spec, CirClock):
        A, B = cir_AB_closed_form(spec.kappa, spec.theta, spec.xi, T, lam)
        return -A - B * spec.v0
    if isinstance(spec, TwoFactorCirClock):
        return (_log_phi_complex(spec.fast, T, spec.weight * lam)
                + _log_phi_complex(spec.slow, T, (1.0 - spec.weight) * lam))
    if isinstance(spec, SquaredOuClock):
        A, B = sqou_AB_closed_form(spec.alpha, spec.sigma, T, lam)
        return -A - B * spec.y0 ** 2
    if isinstance(spec, TimeDepCirClock):
        segs = _cir_segments_for(spec, 0.0, T)
        A, B = _solve_riccati_segments(lam, segs, complex_valued=True)
        return -A - B * spec.v0
    if isinstance(spec, MarkovSwitchingClock):
        Q = spec.q_matrix
        D = np.diag(np.asarray(spec.levels, dtype=float))
        a = np.asarray(spec.initial_dist, dtype=float)
        one = np.ones(spec.n_states)
        out = np.empty(lam.shape, dtype=complex)
        for i, lv in np.ndenumerate(lam):
            out[i] = a @ expm((Q - lv * D) * T) @ one
        return np.log(out)
    raise UnsupportedFamilyError(f"no complex continuation for {type(spec).__name__}")


def char_fn(spec: ClockSpec, market: MarketEnv, T: float, u) -> Array:
    """Characteristic function of X_T = log F_T on a real frequency grid.

    For array input the grid is treated as an ordered sweep and the complex
    logarithm's argument is kept continuous along it (branch tracking for the
    closed-form continuations).
    """
    u_arr = np.atleast_1d(np.asarray(u, dtype=complex))
    lam = 0.5 * u_arr * u_arr - 1j * BETA * u_arr
    if np.any(np.real(lam) < -1e-12):
        raise DomainError("frequency grid leaves the continuation half-plane")
    logs = _log_phi_complex(spec, T, lam)
    # continuous-argument correction along the sweep: the exponent must vary
    # smoothly in u, so jumps of ~2*pi in the imaginary part are branch slips
    if logs.size > 1:
        im = np.imag(logs)
        im_unwrapped = np.unwrap(im)
        logs = np.real(logs) + 1j * im_unwrapped
    x0 = math.log(market.forward(T))
    out = np.exp(1j * u_arr * x0 + logs)
    return out.reshape(np.shape(u)) if np.ndim(u) else out[()]


def clock_cumulants(spec: ClockSpec, T: float) -> tuple:
    """(mean, variance) of Gamma_T from one-sided finite differences of log Phi.

    Second-order stencils on {0, h, 2h, 3h} keep the evaluation inside the
    lam >= 0 domain shared by every family.
    """
    h = 1e-5
    f = np.asarray(log_phi(spec, T, np.array([0.0, h, 2 * h, 3 * h])), dtype=float)
    m1 = -(-1.5 * f[0] + 2.0 * f[1] - 0.5 * f[2]) / h
    var = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / h ** 2
    return float(m1), float(max(var, 0.0))


# --------------------------------------------------------------------------- #
# COS vanilla pricing
# --------------------------------------------------------------------------- #

def _cos_put_value(spec: ClockSpec, market: MarketEnv, T: float, K: float,
                   n_terms: int, L_mult: float = 12.0) -> float:
    """Undiscounted forward-measure put value by the cosine expansion."""
    m1, var_g = clock_cumulants(spec, T)
    x0 = math.log(market.forward(T))
    # cumulants of y = X_T - log K
    c1 = x0 + BETA * m1 - math.log(K)
    c2 = m1 + BETA ** 2 * var_g
    half = L_mult * math.sqrt(max(c2, 1e-12))
    a, b = c1 - half, c1 + half

    k = np.arange(n_terms)
    w = k * np.pi / (b - a)
    # payoff cosine coefficients of K(1 - e^y)^+ on [a, 0]
    lo, hi = a, min(0.0, b)
    if hi <= lo:
        return 0.0
    arg_hi = w * (hi - a)
    arg_lo = w * (lo - a)
    denom = 1.0 + w * w
    chi = (np.cos(arg_hi) * math.exp(hi) - np.cos(arg_lo) * math.exp(lo)
           + w * np.sin(arg_hi) * math.exp(hi) - w * np.sin(arg_lo) * math.exp(lo)) / denom
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(k == 0, hi - lo, (np.sin(arg_hi) - np.sin(arg_lo)) / np.where(w == 0, 1.0, w))
    V = 2.0 / (b - a) * K * (psi - chi)

    cf = char_fn(spec, market, T, w)
    # shift to y = X - log K and anchor the expansion at a
    phase = cf * np.exp(-1j * w * math.log(K)) * np.exp(-1j * w * a)
    terms = np.real(phase) * V
    terms[0] *= 0.5
    return float(terms.sum())


def cos_vanilla_price(spec: ClockSpec, market: MarketEnv, quote: VanillaQuote,
                      n_terms: int = 512, tol: float = 1e-8) -> float:
    """Vanilla price by the COS method, stable under term-count doubling.

    Puts are priced directly; calls via parity against the forward.
    """
    T, K = quote.maturity, quote.strike
    P = market.discount(T)
    prev = None
    n = n_terms
    for _ in range(6):
        put_fwd = _cos_put_value(spec, market, T, K, n)
        if prev is not None and abs(put_fwd - prev) < tol:
            break
        prev = put_fwd
        n *= 2
    else:
        raise ConvergenceError("COS expansion did not stabilize under doubling",
                               last_estimates=(prev, put_fwd))
    put_price = P * max(put_fwd, 0.0)
    if quote.kind == "put":
        return put_price
    return put_price + P * (market.forward(T) - K)


# --------------------------------------------------------------------------- #
# Black formula and implied vol inversion
# --------------------------------------------------------------------------- #

def black_price(F: float, K: float, T: float, vol: float, kind: str = "call",
                discount: float = 1.0) -> float:
    if vol <= 0:
        intrinsic = max(F - K, 0.0) if kind == "call" else max(K - F, 0.0)
        return discount * intrinsic
    s = vol * math.sqrt(T)
    d1 = math.log(F / K) / s + 0.5 * s
    d2 = d1 - s
    if kind == "call":
        return discount * (F * norm.cdf(d1) - K * norm.cdf(d2))
    return discount * (K * norm.cdf(-d2) - F * norm.cdf(-d1))


def black_vega(F: float, K: float, T: float, vol: float,
               discount: float = 1.0) -> float:
    s = vol * math.sqrt(T)
    d1 = math.log(F / K) / s + 0.5 * s
    return discount * F * norm.pdf(d1) * math.sqrt(T)


def implied_vol(price: float, market: MarketEnv, quote: VanillaQuote,
                tol: float = 1e-10, max_vol: float = 5.0) -> float:
    """Black implied vol by Newton with a bracketed Brent fallback."""
    T, K, kind = quote.maturity, quote.strike, quote.kind
    F = market.forward(T)
    P = market.discount(T)
    intrinsic = P * (max(F - K, 0.0) if kind == "call" else max(K - F, 0.0))
    upper = P * F if kind == "call" else P * K
    if not intrinsic < price < upper:
        raise DomainError(
            f"price {price:.6g} outside the no-arbitrage band "
            f"({intrinsic:.6g}, {upper:.6g})")

    vol = 0.2
    for _ in range(20):
        diff = black_price(F, K, T, vol, kind, P) - price
        vega = black_vega(F, K, T, vol, P)
        if vega < 1e-14:
            break
        step = diff / vega
        vol_new = vol - step
        if not 1e-9 < vol_new < max_vol:
            break
        if abs(step) < tol:
            return vol_new
        vol = vol_new
    # robust fallback
    f = lambda v: black_price(F, K, T, v, kind, P) - price
    return brentq(f, 1e-9, max_vol, xtol=tol)


# --------------------------------------------------------------------------- #
# Variance swap strikes
# --------------------------------------------------------------------------- #

def variance_swap_strike(spec: ClockSpec, T: float) -> float:
    """Annualized expected average variance (1/T) E[Gamma_T].

    Closed forms per family; the Markov chain integrates its mean-activity
    curve through the augmented matrix exponential.
    """
    if T <= 0:
        raise DomainError("maturity must be > 0")
    from .clocks import expected_clock
    return expected_clock(spec, T) / T


def atm_total_variance(spec: ClockSpec, market: MarketEnv, T: float,
                       n_terms: int = 512) -> float:
    """Model ATM-forward implied total variance (vol^2 * T) via COS + inversion."""
    F = market.forward(T)
    quote = VanillaQuote(maturity=T, strike=F, kind="put")
    price = cos_vanilla_price(spec, market, quote, n_terms=n_terms)
    vol = implied_vol(price, market, quote)
    return vol * vol * T
