"""Single- and double-barrier pricing under an independent stochastic clock.

Everything is expressed in forward log-units: X = log F with F the T-forward
price, so X = x0 + beta*Gamma + B_Gamma with the martingale normalization
beta = -1/2. Barriers are constant levels on the forward. The clock enters
only through a vectorized callable lam -> Phi(lam).

Building blocks for an upper barrier h, start x0 < h, drift beta
(a = h - x0):

  killed density   j(x)   = (2/pi) e^{beta(x-x0)} int sin(u a) sin(u(h-x))
                            Phi((u^2+beta^2)/2) du
  upper tail       R(x)   = Q(X_T > x, max X < h)
                          = (2/pi) e^{-beta x0} int sin(u a) *
                            { e^{beta h} u - e^{beta x}[u cos(u(h-x)) +
                              beta sin(u(h-x))] } / (u^2+beta^2) * Phi du
  survival         S      = (2/pi) e^{beta a} int u sin(u a)/(u^2+beta^2) Phi du
                            (beta >= 0), and S(-beta) via the drift-flip
                            identity S(beta) = 1 - e^{2 beta a}(1 - S(-beta))
  joint CDF        J(x)   = S - R(x)

Lower-barrier problems map to upper ones by the reflection x -> 2l - x
(drift flips sign). Combining the pieces collapses the up-and-out put and
down-and-out call into a constant plus one oscillatory integral; the
double knock-out contract is a Dirichlet sine series on the corridor with
the clock sampled on a fixed discrete grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .clocks import TransformCache
from .errors import ConvergenceError, DomainError, GeometryError
from .quadrature import QuadratureConfig, integrate_oscillatory

Array = np.ndarray

BETA = -0.5  # martingale normalization of the log-forward drift

# quadrature noise below this magnitude is clamped to zero; anything more
# negative is surfaced as an error rather than hidden
NEG_CLAMP = -1e-10


class ContractKind(Enum):
    UP_OUT_PUT = "uop"
    DOWN_OUT_CALL = "doc"
    DKO_CALL = "dko_call"
    DKO_PUT = "dko_put"


@dataclass(frozen=True)
class BarrierContract:
    """Knock-out payoff descriptor. Barriers are forward levels."""

    kind: ContractKind
    strike: float
    maturity: float
    upper_barrier: Optional[float] = None
    lower_barrier: Optional[float] = None

    def __post_init__(self):
        if self.strike <= 0:
            raise DomainError("strike must be > 0")
        if self.maturity <= 0:
            raise DomainError("maturity must be > 0")
        needs_upper = self.kind in (ContractKind.UP_OUT_PUT, ContractKind.DKO_CALL,
                                    ContractKind.DKO_PUT)
        needs_lower = self.kind in (ContractKind.DOWN_OUT_CALL, ContractKind.DKO_CALL,
                                    ContractKind.DKO_PUT)
        if needs_upper and (self.upper_barrier is None or self.upper_barrier <= 0):
            raise DomainError(f"{self.kind.value} requires a positive upper barrier")
        if needs_lower and (self.lower_barrier is None or self.lower_barrier <= 0):
            raise DomainError(f"{self.kind.value} requires a positive lower barrier")
        if (self.upper_barrier is not None and self.lower_barrier is not None
                and self.lower_barrier >= self.upper_barrier):
            raise GeometryError("lower barrier must lie below upper barrier")


@dataclass(frozen=True)
class MarketEnv:
    """Flat-carry market: spot, short rate, dividend yield."""

    spot: float
    rate: float
    dividend: float = 0.0

    def __post_init__(self):
        if self.spot <= 0:
            raise DomainError("spot must be > 0")

    def forward(self, T: float) -> float:
        return self.spot * math.exp((self.rate - self.dividend) * T)

    def discount(self, T: float) -> float:
        return math.exp(-self.rate * T)


PhiFn = Callable[[Array], Array]


def _lam_of(u: Array, beta: float) -> Array:
    return 0.5 * (u * u + beta * beta)


def _clamp_probability_like(value: float, what: str, upper: Optional[float] = None) -> float:
    if value < 0.0:
        if value < NEG_CLAMP:
            raise ConvergenceError(
                f"{what} came out {value:.3e} < 0 beyond quadrature noise")
        value = 0.0
    if upper is not None and value > upper:
        if value > upper - NEG_CLAMP:
            value = upper
    return value


# --------------------------------------------------------------------------- #
# Upper-barrier primitives
# --------------------------------------------------------------------------- #

def killed_density(x: float, h: float, x0: float, beta: float, phi: PhiFn,
                   cfg: QuadratureConfig | None = None) -> float:
    """Terminal density at x of paths that never crossed the upper barrier h."""
    if not (x < h and x0 < h):
        raise DomainError("killed density needs x < h and x0 < h")

    def f(u):
        return np.sin(u * (h - x0)) * np.sin(u * (h - x)) * phi(_lam_of(u, beta))

    val = integrate_oscillatory(f, (h - x0) + (h - x), cfg)
    val *= (2.0 / np.pi) * math.exp(beta * (x - x0))
    return _clamp_probability_like(val, "killed density")


def upper_tail(x: float, h: float, x0: float, beta: float, phi: PhiFn,
               cfg: QuadratureConfig | None = None) -> float:
    """Q(X_T > x, max X < h) for x < h; valid for either drift sign."""
    if not (x < h and x0 < h):
        raise DomainError("upper tail needs x < h and x0 < h")

    ebh = math.exp(beta * h)
    ebx = math.exp(beta * x)

    def f(u):
        num = ebh * u - ebx * (u * np.cos(u * (h - x)) + beta * np.sin(u * (h - x)))
        return np.sin(u * (h - x0)) * num / (u * u + beta * beta) * phi(_lam_of(u, beta))

    val = (2.0 / np.pi) * math.exp(-beta * x0) * integrate_oscillatory(
        f, (h - x0) + (h - x), cfg)
    return _clamp_probability_like(val, "upper-tail probability", upper=1.0)


def survival_probability(h: float, x0: float, beta: float, phi: PhiFn,
                         cfg: QuadratureConfig | None = None) -> float:
    """Q(max X < h). Nonnegative drift integrates directly; negative drift
    goes through the drift-flip identity S(beta) = 1 - e^{2 beta a}(1 - S(-beta))."""
    if not x0 < h:
        raise DomainError("survival needs x0 < h")
    a = h - x0
    if beta < 0.0:
        s_flip = survival_probability(h, x0, -beta, phi, cfg)
        val = 1.0 - math.exp(2.0 * beta * a) * (1.0 - s_flip)
        return _clamp_probability_like(val, "survival probability", upper=1.0)

    def f(u):
        return u * np.sin(u * a) / (u * u + beta * beta) * phi(_lam_of(u, beta))

    val = (2.0 / np.pi) * math.exp(beta * a) * integrate_oscillatory(f, a, cfg)
    return _clamp_probability_like(val, "survival probability", upper=1.0)


def joint_cdf(x: float, h: float, x0: float, beta: float, phi: PhiFn,
              cfg: QuadratureConfig | None = None) -> float:
    """Q(X_T <= x, max X < h) = survival - upper tail."""
    val = survival_probability(h, x0, beta, phi, cfg) - upper_tail(x, h, x0, beta, phi, cfg)
    return _clamp_probability_like(val, "joint CDF", upper=1.0)


# --------------------------------------------------------------------------- #
# Single-barrier prices
# --------------------------------------------------------------------------- #

def _uop_value_forward(F0: float, K: float, H: float, phi: PhiFn,
                       cfg: QuadratureConfig | None) -> float:
    """Undiscounted up-and-out put value in forward units (beta = -1/2)."""
    x0, k, h = math.log(F0), math.log(K), math.log(H)
    if K < H:
        def f(u):
            return (np.sin(u * (h - x0)) * np.sin(u * (h - k)) / (u * u + 0.25)
                    * phi(_lam_of(u, BETA)))

        integral = integrate_oscillatory(f, (h - x0) + (h - k), cfg)
        val = K * (1.0 - F0 / H) - (2.0 / np.pi) * math.sqrt(K * F0) * integral
    else:
        # strike at or beyond the barrier: payoff positive on the whole
        # surviving range, value = K S(-1/2) - F0 S(+1/2)
        def f(u):
            return (u * np.sin(u * (h - x0)) / (u * u + 0.25)
                    * phi(_lam_of(u, BETA)))

        integral = integrate_oscillatory(f, h - x0, cfg)
        val = (K * (1.0 - F0 / H)
               - (1.0 - K / H) * math.sqrt(F0 * H) * (2.0 / np.pi) * integral)
    return _clamp_probability_like(val, "up-and-out put value")


def _doc_value_forward(F0: float, K: float, L: float, phi: PhiFn,
                       cfg: QuadratureConfig | None) -> float:
    """Undiscounted down-and-out call value in forward units (beta = -1/2)."""
    x0, k, l = math.log(F0), math.log(K), math.log(L)
    if K > L:
        def f(u):
            return (np.sin(u * (x0 - l)) * np.sin(u * (k - l)) / (u * u + 0.25)
                    * phi(_lam_of(u, BETA)))

        integral = integrate_oscillatory(f, (x0 - l) + (k - l), cfg)
        val = (F0 - L) - (2.0 / np.pi) * math.sqrt(K * F0) * integral
    else:
        # strike at or below the barrier: payoff positive on the whole
        # surviving range, value = F0 S_low(+1/2) - K S_low(-1/2)
        def f(u):
            return (u * np.sin(u * (x0 - l)) / (u * u + 0.25)
                    * phi(_lam_of(u, BETA)))

        integral = integrate_oscillatory(f, x0 - l, cfg)
        val = (F0 - L) + (L - K) * math.sqrt(F0 / L) * (2.0 / np.pi) * integral
    return _clamp_probability_like(val, "down-and-out call value")


def price_uop(contract: BarrierContract, market: MarketEnv, phi: PhiFn,
              cfg: QuadratureConfig | None = None,
              cross_check: bool = False) -> float:
    """Up-and-out put price.

    cross_check=True prices through the measure-change decomposition
    K*J_{-1/2} - F0*J_{+1/2} instead of the collapsed one-integral form.
    """
    if contract.kind is not ContractKind.UP_OUT_PUT:
        raise DomainError("price_uop expects an up-and-out put contract")
    T = contract.maturity
    F0, K, H = market.forward(T), contract.strike, contract.upper_barrier
    if F0 >= H:
        raise GeometryError("contract is knocked out: forward at or above the barrier")
    P = market.discount(T)
    if cross_check:
        x0, h = math.log(F0), math.log(H)
        m = min(math.log(K), h - 1e-14)
        val = K * joint_cdf(m, h, x0, BETA, phi, cfg) \
            - F0 * joint_cdf(m, h, x0, -BETA, phi, cfg)
        return P * _clamp_probability_like(val, "up-and-out put value")
    return P * _uop_value_forward(F0, K, H, phi, cfg)


def price_doc(contract: BarrierContract, market: MarketEnv, phi: PhiFn,
              cfg: QuadratureConfig | None = None,
              cross_check: bool = False) -> float:
    """Down-and-out call price.

    cross_check=True prices via reflection about the lower barrier
    (lower-barrier problems are upper-barrier problems for 2l - X).
    """
    if contract.kind is not ContractKind.DOWN_OUT_CALL:
        raise DomainError("price_doc expects a down-and-out call contract")
    T = contract.maturity
    F0, K, L = market.forward(T), contract.strike, contract.lower_barrier
    if F0 <= L:
        raise GeometryError("contract is knocked out: forward at or below the barrier")
    P = market.discount(T)
    if cross_check:
        x0, k, l = math.log(F0), math.log(K), math.log(L)
        # reflect: z = 2l - x; min X > l <=> max Z < l; X >= k <=> Z <= 2l - k
        z0 = 2.0 * l - x0
        m = min(2.0 * l - k, l - 1e-14)
        val = F0 * joint_cdf(m, l, z0, BETA, phi, cfg) \
            - K * joint_cdf(m, l, z0, -BETA, phi, cfg)
        return P * _clamp_probability_like(val, "down-and-out call value")
    return P * _doc_value_forward(F0, K, L, phi, cfg)


# --------------------------------------------------------------------------- #
# Double knock-out: Dirichlet sine series
# --------------------------------------------------------------------------- #

def dirichlet_grid(lower: float, upper: float, n_max: int, beta: float = BETA) -> Array:
    """lam_n = ((n pi / a)^2 + beta^2)/2 on the log-corridor a = log(upper/lower)."""
    if not 0 < lower < upper:
        raise GeometryError("need 0 < lower < upper")
    if n_max < 1:
        raise DomainError("n_max must be >= 1")
    a = math.log(upper / lower)
    omega = np.arange(1, n_max + 1) * np.pi / a
    return 0.5 * (omega * omega + beta * beta)


def dko_coefficients(contract: BarrierContract, n_max: int, beta: float = BETA) -> Array:
    """Closed-form payoff projection coefficients of the corridor sine series.

    Call:  A_n = int_c^h (e^x - K) e^{beta x} sin(omega_n (x-l)) dx, c = max(k, l)
    Put:   A_n = int_l^d (K - e^x) e^{beta x} sin(omega_n (x-l)) dx, d = min(k, h)
    with A_n = 0 for empty integration ranges.
    """
    if n_max < 1:
        raise DomainError("n_max must be >= 1")
    K = contract.strike
    l = math.log(contract.lower_barrier)
    h = math.log(contract.upper_barrier)
    k = math.log(K)
    a = h - l
    omega = np.arange(1, n_max + 1) * np.pi / a

    def F(alpha: float, x: float) -> Array:
        # antiderivative of e^{alpha x} sin(omega (x - l))
        s = np.sin(omega * (x - l))
        c = np.cos(omega * (x - l))
        return np.exp(alpha * x) * (alpha * s - omega * c) / (alpha * alpha + omega * omega)

    if contract.kind is ContractKind.DKO_CALL:
        c = max(k, l)
        if c >= h:
            return np.zeros(n_max)
        return (F(beta + 1.0, h) - F(beta + 1.0, c)) - K * (F(beta, h) - F(beta, c))
    if contract.kind is ContractKind.DKO_PUT:
        d = min(k, h)
        if d <= l:
            return np.zeros(n_max)
        return K * (F(beta, d) - F(beta, l)) - (F(beta + 1.0, d) - F(beta + 1.0, l))
    raise DomainError("dko_coefficients expects a double knock-out contract")


@dataclass(frozen=True)
class DkoResult:
    price: float
    n_terms: int


def price_dko(contract: BarrierContract, market: MarketEnv, cache: TransformCache,
              abs_tol: float = 1e-12, n_max: int = 2000) -> DkoResult:
    """Corridor knock-out price by the Dirichlet sine series.

    The cache must hold Phi on the exact corridor grid
    lam_n = ((n pi / a)^2 + 1/4)/2. Truncation: stop at the first n where
    three consecutive terms are each below abs_tol * max(1, |running sum|).
    """
    if contract.kind not in (ContractKind.DKO_CALL, ContractKind.DKO_PUT):
        raise DomainError("price_dko expects a double knock-out contract")
    T = contract.maturity
    F0 = market.forward(T)
    L, H = contract.lower_barrier, contract.upper_barrier
    if not L < F0 < H:
        if F0 == L or F0 == H:
            return DkoResult(price=0.0, n_terms=0)  # starting on a barrier: knocked out
        raise GeometryError("forward must start inside the corridor")

    n_avail = len(cache.grid)
    expected = dirichlet_grid(L, H, n_avail)
    if not np.allclose(cache.grid, expected, rtol=1e-12, atol=0.0):
        raise DomainError("transform cache grid does not match the corridor grid")

    x0, l, h = math.log(F0), math.log(L), math.log(H)
    a = h - l
    n_use = min(n_max, n_avail)
    A = dko_coefficients(contract, n_use)
    omega = np.arange(1, n_use + 1) * np.pi / a
    phi_vals = cache.phi[:n_use]
    terms = np.sin(omega * (x0 - l)) * A * phi_vals

    total = 0.0
    small_run = 0
    n_used = n_use
    for i, t in enumerate(terms):
        total += t
        if abs(t) < abs_tol * max(1.0, abs(total)):
            small_run += 1
            if small_run >= 3:
                n_used = i + 1
                break
        else:
            small_run = 0
    else:
        # exhausted every available term without the stopping rule firing
        raise ConvergenceError(
            f"corridor series not converged after {n_use} terms "
            f"(cache holds {n_avail}, n_max={n_max})",
            last_estimates=(float(total - terms[-1]), float(total)))

    P = market.discount(T)
    val = P * (2.0 / a) * math.exp(-BETA * x0) * total
    return DkoResult(price=_clamp_probability_like(val, "corridor price"),
                     n_terms=n_used)
