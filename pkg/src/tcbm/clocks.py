"""Stochastic-clock Laplace transforms.

The engine prices every barrier contract through a single model-dependent
object: the Laplace transform of the terminal clock,

    Phi_T(lam) = E[exp(-lam * Gamma_T)],   Gamma_T = integral of the activity v_s,

together with its state-conditional version Phi_{t,T}(lam; y) used by the
leverage layer. Four clock families are supported:

  * CirClock            dv = kappa (theta - v) dt + xi sqrt(v) dZ
  * TimeDepCirClock     piecewise-constant (kappa, theta, xi) segments
  * SquaredOuClock      dY = -alpha Y dt + sigma dZ, v = Y^2
  * MarkovSwitchingClock v = levels[R_t] for a finite-state chain R

plus a TwoFactorCirClock composite (weighted sum of two independent CIR
factors) used by the calibrator; its transform factorizes into scaled
one-factor transforms.

Affine/quadratic families reduce to a scalar Riccati system

    B'(t) = lam - c1 B - c2 B^2,   A'(t) = c3 B,   A(0) = B(0) = 0,
    Phi = exp(-A(T) - B(T) * s(y0)),

with (c1, c2, c3) = (kappa, xi^2/2, kappa*theta) and s(y)=y for the CIR
family, and (2*alpha, 2*sigma^2, sigma^2) with s(y)=y^2 for the squared OU
family. The sign convention is normalized so Phi stays in (0,1] for lam >= 0;
it is pinned by the deterministic-limit test (xi -> 0 gives
Phi = exp(-lam * Gamma_det)) and by Monte Carlo oracles in the test suite.

All transforms are computed and cached in log form; exponentiation happens at
the consumer with a -700 underflow floor.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .errors import DomainError, IntegrationError, UnsupportedFamilyError

Array = np.ndarray

LOG_PHI_FLOOR = -700.0  # exp() underflow guard: below this Phi is 0 at double precision

_ODE_RTOL = 1e-10
_ODE_ATOL = 1e-12


# --------------------------------------------------------------------------- #
# Clock specifications
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class CirClock:
    """Square-root (CIR) activity: dv = kappa (theta - v) dt + xi sqrt(v) dZ."""

    kappa: float
    theta: float
    xi: float
    v0: float

    def __post_init__(self):
        for name in ("kappa", "theta", "xi", "v0"):
            if getattr(self, name) <= 0.0:
                raise DomainError(f"CirClock.{name} must be > 0")
        if 2.0 * self.kappa * self.theta <= self.xi ** 2:
            warnings.warn(
                "CIR Feller condition 2*kappa*theta > xi^2 violated; "
                "variance paths may touch zero",
                RuntimeWarning,
                stacklevel=2,
            )


@dataclass(frozen=True)
class TimeDepCirClock:
    """CIR with piecewise-constant coefficients on [0, breakpoints[-1]].

    Segment i applies on [breakpoints[i-1], breakpoints[i]) with breakpoints[-1]
    treated as +inf for horizons beyond the last knot.
    """

    breakpoints: tuple
    kappa: tuple
    theta: tuple
    xi: tuple
    v0: float

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        if any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
            raise DomainError("breakpoints must be strictly increasing")
        n = len(bp)
        if not (len(self.kappa) == len(self.theta) == len(self.xi) == n):
            raise DomainError("coefficient segments must match breakpoints")
        if self.v0 <= 0 or any(k <= 0 for k in self.kappa) or \
                any(t <= 0 for t in self.theta) or any(x <= 0 for x in self.xi):
            raise DomainError("TimeDepCirClock parameters must be > 0")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "kappa", tuple(float(k) for k in self.kappa))
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        object.__setattr__(self, "xi", tuple(float(x) for x in self.xi))

    def segments(self, t0: float, t1: float):
        """Yield (a, b, kappa, theta, xi) covering calendar interval [t0, t1]."""
        if t1 <= t0:
            return
        edges = [t0]
        for b in self.breakpoints:
            if t0 < b < t1:
                edges.append(b)
        edges.append(t1)
        for a, b in zip(edges, edges[1:]):
            mid = 0.5 * (a + b)
            idx = int(np.searchsorted(np.asarray(self.breakpoints), mid, side="right"))
            idx = min(idx, len(self.kappa) - 1)
            yield a, b, self.kappa[idx], self.theta[idx], self.xi[idx]


@dataclass(frozen=True)
class SquaredOuClock:
    """Gaussian OU factor with quadratic activity: v = Y^2."""

    alpha: float
    sigma: float
    y0: float  # signed initial OU state

    def __post_init__(self):
        if self.alpha <= 0 or self.sigma <= 0:
            raise DomainError("SquaredOuClock.alpha and .sigma must be > 0")


@dataclass(frozen=True)
class MarkovSwitchingClock:
    """Finite-state regime activity: v_t = levels[R_t], R a CTMC with generator Q."""

    generator: tuple      # m x m nested tuples, rows sum to 0
    levels: tuple         # m activity levels >= 0
    initial_dist: tuple   # probability vector

    def __post_init__(self):
        Q = np.asarray(self.generator, dtype=float)
        lv = np.asarray(self.levels, dtype=float)
        a = np.asarray(self.initial_dist, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise DomainError("generator must be square")
        m = Q.shape[0]
        if lv.shape != (m,) or a.shape != (m,):
            raise DomainError("generator, levels and initial_dist sizes disagree")
        if np.any(lv < 0):
            raise DomainError("activity levels must be >= 0")
        off = Q - np.diag(np.diag(Q))
        if np.any(off < -1e-12):
            raise DomainError("generator off-diagonals must be >= 0")
        if np.max(np.abs(Q.sum(axis=1))) > 1e-12:
            raise DomainError("generator rows must sum to 0 (within 1e-12)")
        if abs(a.sum() - 1.0) > 1e-12 or np.any(a < 0):
            raise DomainError("initial_dist must be a probability vector")
        object.__setattr__(self, "generator", tuple(tuple(row) for row in Q))
        object.__setattr__(self, "levels", tuple(lv))
        object.__setattr__(self, "initial_dist", tuple(a))

    @property
    def q_matrix(self) -> Array:
        return np.asarray(self.generator, dtype=float)

    @property
    def n_states(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class TwoFactorCirClock:
    """Activity v = w * v_fast + (1 - w) * v_slow with independent CIR factors.

    The transform factorizes: Phi(lam) = Phi_fast(w*lam) * Phi_slow((1-w)*lam).
    """

    fast: CirClock
    slow: CirClock
    weight: float

    def __post_init__(self):
        if not 0.0 < self.weight < 1.0:
            raise DomainError("weight must lie in (0, 1)")
        if self.fast.kappa <= self.slow.kappa:
            raise DomainError("fast factor must mean-revert faster than slow")


ClockSpec = Union[CirClock, TimeDepCirClock, SquaredOuClock,
                  MarkovSwitchingClock, TwoFactorCirClock]


def clock_digest(spec: ClockSpec) -> str:
    """Canonical parameter digest (15 significant digits), stable across runs."""

    def r15(x):
        return float(f"{float(x):.15g}")

    def encode(s):
        if isinstance(s, CirClock):
            return {"family": "cir", "kappa": r15(s.kappa), "theta": r15(s.theta),
                    "xi": r15(s.xi), "v0": r15(s.v0)}
        if isinstance(s, TimeDepCirClock):
            return {"family": "tdcir", "breakpoints": [r15(b) for b in s.breakpoints],
                    "kappa": [r15(k) for k in s.kappa], "theta": [r15(t) for t in s.theta],
                    "xi": [r15(x) for x in s.xi], "v0": r15(s.v0)}
        if isinstance(s, SquaredOuClock):
            return {"family": "sqou", "alpha": r15(s.alpha),
                    "sigma": r15(s.sigma), "y0": r15(s.y0)}
        if isinstance(s, MarkovSwitchingClock):
            return {"family": "markov",
                    "generator": [[r15(q) for q in row] for row in s.generator],
                    "levels": [r15(v) for v in s.levels],
                    "initial_dist": [r15(p) for p in s.initial_dist]}
        if isinstance(s, TwoFactorCirClock):
            return {"family": "cir2", "fast": encode(s.fast), "slow": encode(s.slow),
                    "weight": r15(s.weight)}
        raise UnsupportedFamilyError(f"unknown clock spec {type(s).__name__}")

    blob = json.dumps(encode(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- #
# Riccati solutions
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class RiccatiSolution:
    """Terminal (A, B) of the scalar Riccati system for one Laplace argument.

    Phi = exp(-A - B * state); A(0) = B(0) = 0 so Phi -> 1 as horizon -> 0.
    """

    lam: float
    horizon: float
    A: float
    B: float
    time_grid: Optional[tuple] = None  # optional sampled (s, A(s), B(s)) rows


def _cir_gamma(kappa: float, xi: float, lam):
    return np.sqrt(kappa * kappa + 2.0 * xi * xi * lam)


def _log1p_any(z):
    z = np.asarray(z)
    if np.iscomplexobj(z):
        return np.log(1.0 + z)
    return np.log1p(z)


def cir_AB_closed_form(kappa: float, theta: float, xi: float, horizon: float, lam):
    """Classical hyperbolic-function solution of the constant-coefficient system.

    Valid for real lam >= -kappa^2/(2 xi^2) and for complex lam with
    Re(lam) >= 0 (principal square root has positive real part there).
    Returns (A, B) with Phi = exp(-A - B v0). Written so the xi -> 0 and
    lam -> 0 limits stay cancellation-free: gam - kappa is evaluated as
    2 xi^2 lam / (gam + kappa) throughout.
    """
    lam = np.asarray(lam)
    gam = _cir_gamma(kappa, xi, lam)
    gmk = 2.0 * xi * xi * lam / (gam + kappa)   # = gam - kappa, stable
    one_m_egt = -np.expm1(-gam * horizon) if not np.iscomplexobj(gam) \
        else 1.0 - np.exp(-gam * horizon)
    egt = np.exp(-gam * horizon)
    denom = (gam + kappa) + gmk * egt
    B = 2.0 * lam * one_m_egt / denom
    # bracket - 1 of ((1+k/g) + (1-k/g) e^{-gT})/2, exactly
    br_m1 = -gmk * one_m_egt / (2.0 * gam)
    A = (2.0 * kappa * theta / xi ** 2) * _log1p_any(br_m1) \
        + 2.0 * kappa * theta * lam * horizon / (gam + kappa)
    return A, B


def sqou_AB_closed_form(alpha: float, sigma: float, horizon: float, lam):
    """Cameron-Martin closed form for the squared-OU clock; test oracle and
    complex-continuation fast path. Phi = exp(-A - B y0^2)."""
    lam = np.asarray(lam)
    gam = np.sqrt(alpha * alpha + 2.0 * sigma * sigma * lam)
    gma = 2.0 * sigma * sigma * lam / (gam + alpha)   # = gam - alpha, stable
    one_m_egt = -np.expm1(-2.0 * gam * horizon) if not np.iscomplexobj(gam) \
        else 1.0 - np.exp(-2.0 * gam * horizon)
    egt = np.exp(-2.0 * gam * horizon)
    denom = (gam + alpha) + gma * egt
    B = lam * one_m_egt / denom
    br_m1 = -gma * one_m_egt / (2.0 * gam)
    A = 0.5 * _log1p_any(br_m1) + sigma * sigma * lam * horizon / (gam + alpha)
    return A, B


def _solve_riccati_segments(lam, segments, complex_valued=False, dense_times=None):
    """Integrate B' = lam - c1 B - c2 B^2, A' = c3 B over chained segments.

    lam : array of Laplace arguments (solved jointly as one vector ODE).
    segments : iterable of (t0, t1, c1, c2, c3) in integration time.
    Returns (A, B) arrays; raises IntegrationError localized to the worst lam.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=complex if complex_valued else float))
    n = lam.size
    dtype = complex if complex_valued else float
    y = np.zeros(2 * n, dtype=dtype)
    out_times = []
    out_AB = []

    for (t0, t1, c1, c2, c3) in segments:
        def rhs(t, yy):
            B = yy[:n]
            A_dot = c3 * B
            B_dot = lam - c1 * B - c2 * B * B
            return np.concatenate([B_dot, A_dot])

        t_eval = None
        if dense_times is not None:
            inside = [t for t in dense_times if t0 < t <= t1]
            t_eval = sorted(set(inside + [t1]))
        sol = solve_ivp(rhs, (t0, t1), y, method="RK45",
                        rtol=_ODE_RTOL, atol=_ODE_ATOL, t_eval=t_eval)
        if not sol.success:
            bad = _localize_riccati_failure(lam, (t0, t1, c1, c2, c3), complex_valued)
            raise IntegrationError(
                f"Riccati integration failed on segment [{t0:g},{t1:g}] "
                f"at lam={bad!r}: {sol.message}")
        if dense_times is not None:
            for j, tj in enumerate(sol.t):
                out_times.append(tj)
                out_AB.append((sol.y[n:, j].copy(), sol.y[:n, j].copy()))
        y = sol.y[:, -1]

    B = y[:n]
    A = y[n:]
    if dense_times is not None:
        return A, B, out_times, out_AB
    return A, B


def _localize_riccati_failure(lam, segment, complex_valued):
    """Find one offending lam by scalar re-integration (diagnostic path)."""
    t0, t1, c1, c2, c3 = segment
    for lv in np.atleast_1d(lam):
        def rhs(t, yy):
            return [lv - c1 * yy[0] - c2 * yy[0] ** 2, c3 * yy[0]]
        y0 = [0.0 * lv, 0.0 * lv] if complex_valued else [0.0, 0.0]
        sol = solve_ivp(rhs, (t0, t1), y0, method="RK45",
                        rtol=_ODE_RTOL, atol=_ODE_ATOL)
        if not sol.success:
            return lv
    return np.atleast_1d(lam)[-1]


def _cir_segments_for(spec, t: float, T: float):
    """Riccati segments, in time-to-go, for the conditional transform on [t, T]."""
    if isinstance(spec, CirClock):
        return [(0.0, T - t, spec.kappa, 0.5 * spec.xi ** 2, spec.kappa * spec.theta)]
    # time-dependent: integrating in tau = T - s reverses the calendar segments
    segs = list(spec.segments(t, T))
    out = []
    for (a, b, k, th, x) in reversed(segs):
        out.append((T - b, T - a, k, 0.5 * x ** 2, k * th))
    # re-anchor to contiguous [0, T-t]
    out2 = []
    cur = 0.0
    for (a, b, k, c2, c3) in out:
        out2.append((cur, cur + (b - a), k, c2, c3))
        cur += b - a
    return out2


# --------------------------------------------------------------------------- #
# Family transforms (log form)
# --------------------------------------------------------------------------- #

def _check_lambda_T(lam, T):
    lam = np.asarray(lam)
    if np.any(np.real(lam) < 0):
        raise DomainError("Laplace argument must satisfy Re(lam) >= 0")
    if T <= 0:
        raise DomainError("horizon must be > 0")


def log_phi_cir_closed_form(spec: CirClock, T: float, lam) -> Array:
    _check_lambda_T(lam, T)
    A, B = cir_AB_closed_form(spec.kappa, spec.theta, spec.xi, T, lam)
    return -A - B * spec.v0


def phi_cir_closed_form(spec: CirClock, T: float, lam):
    """Phi for the CIR clock via the classical closed form."""
    return _exp_floor(log_phi_cir_closed_form(spec, T, lam))


def log_phi_riccati_numeric(spec, T: float, lam) -> Array:
    _check_lambda_T(lam, T)
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
    segs = _cir_segments_for(spec, 0.0, T)
    A, B = _solve_riccati_segments(lam_arr, segs)
    v0 = spec.v0
    out = -A - B * v0
    return out.reshape(np.shape(lam)) if np.ndim(lam) else out[0]


def phi_riccati_numeric(spec, T: float, lam):
    """Phi for CIR / time-dependent CIR via adaptive Runge-Kutta integration."""
    if not isinstance(spec, (CirClock, TimeDepCirClock)):
        raise UnsupportedFamilyError("phi_riccati_numeric expects a CIR-type clock")
    return _exp_floor(log_phi_riccati_numeric(spec, T, lam))


def log_phi_squared_ou(spec: SquaredOuClock, T: float, lam) -> Array:
    _check_lambda_T(lam, T)
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
    segs = [(0.0, T, 2.0 * spec.alpha, 2.0 * spec.sigma ** 2, spec.sigma ** 2)]
    A, B = _solve_riccati_segments(lam_arr, segs)
    out = -A - B * spec.y0 ** 2
    return out.reshape(np.shape(lam)) if np.ndim(lam) else out[0]


def phi_squared_ou(spec: SquaredOuClock, T: float, lam):
    """Phi for the squared-OU clock (numeric Riccati integration)."""
    return _exp_floor(log_phi_squared_ou(spec, T, lam))


def phi_markov_switching(spec: MarkovSwitchingClock, T: float, lam):
    """Phi = alpha' expm((Q - lam D) T) 1 via scaling-and-squaring."""
    _check_lambda_T(lam, T)
    Q = spec.q_matrix
    D = np.diag(np.asarray(spec.levels, dtype=float))
    a = np.asarray(spec.initial_dist, dtype=float)
    one = np.ones(spec.n_states)
    lam_arr = np.atleast_1d(np.asarray(lam))
    out = np.empty(lam_arr.shape, dtype=lam_arr.dtype if np.iscomplexobj(lam_arr) else float)
    for i, lv in enumerate(lam_arr):
        M = expm((Q - lv * D) * T)
        val = a @ M @ one
        if not np.iscomplexobj(lam_arr):
            val = float(np.real(val))
            # rounding can push marginally past [0, 1]
            if -1e-12 <= val < 0.0:
                val = 0.0
            elif 1.0 < val <= 1.0 + 1e-12:
                val = 1.0
        out[i] = val
    return out.reshape(np.shape(lam)) if np.ndim(lam) else out[0]


def log_phi_markov_switching(spec: MarkovSwitchingClock, T: float, lam) -> Array:
    phi = np.asarray(phi_markov_switching(spec, T, lam), dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(phi > 0.0, np.log(np.maximum(phi, 1e-320)), LOG_PHI_FLOOR)


def _exp_floor(log_phi):
    log_phi = np.asarray(log_phi)
    if np.iscomplexobj(log_phi):
        re = np.real(log_phi)
        out = np.where(re < LOG_PHI_FLOOR, 0.0, np.exp(np.where(re < LOG_PHI_FLOOR, 0.0, log_phi)))
        return out if out.ndim else out[()]
    out = np.where(log_phi < LOG_PHI_FLOOR, 0.0,
                   np.exp(np.maximum(log_phi, LOG_PHI_FLOOR)))
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------- #
# Unified dispatch and conditional transforms
# --------------------------------------------------------------------------- #

def log_phi(spec: ClockSpec, T: float, lam, numeric_cir: bool = False) -> Array:
    """log Phi_T(lam) for any supported family (real lam >= 0)."""
    if isinstance(spec, CirClock):
        if numeric_cir:
            return log_phi_riccati_numeric(spec, T, lam)
        return log_phi_cir_closed_form(spec, T, lam)
    if isinstance(spec, TimeDepCirClock):
        return log_phi_riccati_numeric(spec, T, lam)
    if isinstance(spec, SquaredOuClock):
        return log_phi_squared_ou(spec, T, lam)
    if isinstance(spec, MarkovSwitchingClock):
        return log_phi_markov_switching(spec, T, lam)
    if isinstance(spec, TwoFactorCirClock):
        lam = np.asarray(lam)
        return (log_phi_cir_closed_form(spec.fast, T, spec.weight * lam)
                + log_phi_cir_closed_form(spec.slow, T, (1.0 - spec.weight) * lam))
    raise UnsupportedFamilyError(f"unknown clock spec {type(spec).__name__}")


def phi(spec: ClockSpec, T: float, lam):
    return _exp_floor(log_phi(spec, T, lam))


def conditional_AB(spec: ClockSpec, t: float, T: float, lam) -> tuple:
    """(A, B) of the conditional transform Phi_{t,T}(lam; y) = exp(-A - B s(y)).

    Only affine/quadratic families carry an (A, B) representation.
    """
    if not 0.0 <= t < T:
        raise DomainError("need 0 <= t < T")
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(lam_arr < 0):
        raise DomainError("Laplace argument must be >= 0")
    if isinstance(spec, CirClock):
        return cir_AB_closed_form(spec.kappa, spec.theta, spec.xi, T - t, lam_arr)
    if isinstance(spec, TimeDepCirClock):
        segs = _cir_segments_for(spec, t, T)
        return _solve_riccati_segments(lam_arr, segs)
    if isinstance(spec, SquaredOuClock):
        segs = [(0.0, T - t, 2.0 * spec.alpha, 2.0 * spec.sigma ** 2, spec.sigma ** 2)]
        return _solve_riccati_segments(lam_arr, segs)
    raise UnsupportedFamilyError(
        f"conditional (A,B) transform not defined for {type(spec).__name__}")


def state_map(spec: ClockSpec, y):
    """s(y) and s'(y): the transform exponent is -A - B*s(y)."""
    if isinstance(spec, (CirClock, TimeDepCirClock)):
        return y, np.ones_like(np.asarray(y, dtype=float))
    if isinstance(spec, SquaredOuClock):
        y = np.asarray(y, dtype=float)
        return y * y, 2.0 * y
    raise UnsupportedFamilyError(
        f"state map not defined for {type(spec).__name__}")


def phi_conditional(spec: ClockSpec, t: float, T: float, lam, y):
    """Conditional transform and its state derivative.

    Returns (Phi_{t,T}(lam; y), dPhi/dy). For the Markov-switching family y is
    the regime index, the transform is the corresponding expm row and the
    derivative is None (no continuous state).
    """
    if isinstance(spec, MarkovSwitchingClock):
        if not 0.0 <= t < T:
            raise DomainError("need 0 <= t < T")
        Q = spec.q_matrix
        D = np.diag(np.asarray(spec.levels, dtype=float))
        one = np.ones(spec.n_states)
        idx = int(y)
        lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
        vals = np.array([float((expm((Q - lv * D) * (T - t)) @ one)[idx])
                         for lv in lam_arr])
        vals = vals.reshape(np.shape(lam)) if np.ndim(lam) else float(vals[0])
        return vals, None
    A, B = conditional_AB(spec, t, T, lam)
    s, ds = state_map(spec, y)
    log_val = -A - B * s
    val = _exp_floor(log_val)
    dval = -B * ds * val
    if np.ndim(lam) == 0:
        return float(np.asarray(val).reshape(-1)[0]), \
            float(np.asarray(dval).reshape(-1)[0])
    return val, dval


# --------------------------------------------------------------------------- #
# Transform caches
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class TransformCache:
    """Write-once grid of log Phi values keyed by (clock digest, t, T).

    values are stored in log form; .phi exposes the floored exponential.
    """

    key: tuple                    # (digest, t, T)
    grid: Array                   # sorted positive lambda values
    log_values: Array
    conditional_state: Optional[float] = None

    def __post_init__(self):
        self.grid.setflags(write=False)
        self.log_values.setflags(write=False)

    @property
    def phi(self) -> Array:
        return _exp_floor(self.log_values)

    def lookup(self, digest: str, t: float, T: float) -> bool:
        return self.key == (digest, float(t), float(T))


def build_transform_cache(spec: ClockSpec, t: float, T: float, grid,
                          y: Optional[float] = None) -> TransformCache:
    """Evaluate the family transform on a grid and freeze the result.

    grid must be sorted, strictly positive and finite. When y is given the
    conditional transform Phi_{t,T}(.; y) is cached instead of Phi_T.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise DomainError("grid must be a non-empty 1-d array")
    if np.any(~np.isfinite(grid)) or np.any(grid <= 0):
        raise DomainError("grid values must be positive and finite")
    if np.any(np.diff(grid) <= 0):
        raise DomainError("grid must be strictly increasing")
    if y is None:
        if t != 0.0:
            raise DomainError("unconditional cache requires t = 0")
        logs = np.asarray(log_phi(spec, T, grid), dtype=float)
    else:
        A, B = conditional_AB(spec, t, T, grid)
        s, _ = state_map(spec, y)
        logs = np.asarray(-A - B * s, dtype=float)
    key = (clock_digest(spec), float(t), float(T))
    return TransformCache(key=key, grid=grid.copy(), log_values=logs,
                          conditional_state=y)


# --------------------------------------------------------------------------- #
# Callable transform wrapper used by the pricers
# --------------------------------------------------------------------------- #

class ClockTransform:
    """Vectorized lam -> Phi callable bound to one (spec, t, T, state).

    Pricers accept any callable; this wrapper adds log-form access, the
    parameter digest and conditional-state support.
    """

    def __init__(self, spec: ClockSpec, T: float, t: float = 0.0,
                 state: Optional[float] = None):
        if state is None and t != 0.0:
            raise DomainError("unconditional transform requires t = 0")
        self.spec = spec
        self.t = float(t)
        self.T = float(T)
        self.state = state
        self.digest = clock_digest(spec)

    def log_phi(self, lam) -> Array:
        if self.state is None:
            return log_phi(self.spec, self.T, lam)
        A, B = conditional_AB(self.spec, self.t, self.T, lam)
        s, _ = state_map(self.spec, self.state)
        return -A - B * s

    def __call__(self, lam):
        return _exp_floor(self.log_phi(lam))


# --------------------------------------------------------------------------- #
# Clock moments (used by variance swaps, MC oracles and grid sizing)
# --------------------------------------------------------------------------- #

def mean_activity(spec: ClockSpec, s) -> Array:
    """E[v_s] for each time in s."""
    s = np.asarray(s, dtype=float)
    if isinstance(spec, CirClock):
        return spec.theta + (spec.v0 - spec.theta) * np.exp(-spec.kappa * s)
    if isinstance(spec, TimeDepCirClock):
        out = np.empty_like(s)
        for i, si in enumerate(np.atleast_1d(s)):
            m, t_cur = spec.v0, 0.0
            for (a, b, k, th, _x) in spec.segments(0.0, float(si)):
                dt = b - a
                m = th + (m - th) * np.exp(-k * dt)
                t_cur = b
            out.flat[i] = m
        return out
    if isinstance(spec, SquaredOuClock):
        decay = np.exp(-2.0 * spec.alpha * s)
        var_inf = spec.sigma ** 2 / (2.0 * spec.alpha)
        return spec.y0 ** 2 * decay + var_inf * (1.0 - decay)
    if isinstance(spec, MarkovSwitchingClock):
        Q = spec.q_matrix
        lv = np.asarray(spec.levels, dtype=float)
        a = np.asarray(spec.initial_dist, dtype=float)
        out = np.empty_like(np.atleast_1d(s))
        for i, si in enumerate(np.atleast_1d(s)):
            out[i] = float(a @ expm(Q * float(si)) @ lv)
        return out.reshape(s.shape)
    if isinstance(spec, TwoFactorCirClock):
        return (spec.weight * mean_activity(spec.fast, s)
                + (1.0 - spec.weight) * mean_activity(spec.slow, s))
    raise UnsupportedFamilyError(f"unknown clock spec {type(spec).__name__}")


def expected_clock(spec: ClockSpec, T: float) -> float:
    """E[Gamma_T] = integral of E[v_s] over [0, T] (closed form per family)."""
    if isinstance(spec, CirClock):
        k = spec.kappa
        return spec.theta * T + (spec.v0 - spec.theta) * (1.0 - np.exp(-k * T)) / k
    if isinstance(spec, SquaredOuClock):
        a2 = 2.0 * spec.alpha
        var_inf = spec.sigma ** 2 / a2
        return var_inf * T + (spec.y0 ** 2 - var_inf) * (1.0 - np.exp(-a2 * T)) / a2
    if isinstance(spec, TimeDepCirClock):
        total, m = 0.0, spec.v0
        for (a, b, k, th, _x) in spec.segments(0.0, T):
            dt = b - a
            total += th * dt + (m - th) * (1.0 - np.exp(-k * dt)) / k
            m = th + (m - th) * np.exp(-k * dt)
        return total
    if isinstance(spec, MarkovSwitchingClock):
        # integral of a' e^{Qs} levels ds via the augmented-matrix exponential
        Q = spec.q_matrix
        m = spec.n_states
        M = np.zeros((2 * m, 2 * m))
        M[:m, :m] = Q
        M[:m, m:] = np.eye(m)
        E = expm(M * T)
        a = np.asarray(spec.initial_dist, dtype=float)
        lv = np.asarray(spec.levels, dtype=float)
        return float(a @ E[:m, m:] @ lv)
    if isinstance(spec, TwoFactorCirClock):
        return (spec.weight * expected_clock(spec.fast, T)
                + (1.0 - spec.weight) * expected_clock(spec.slow, T))
    raise UnsupportedFamilyError(f"unknown clock spec {type(spec).__name__}")
