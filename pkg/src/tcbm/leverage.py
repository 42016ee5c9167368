"""Correlation (leverage) expansion of barrier values around the decoupled model.

With correlation rho between the return and activity drivers, the two-factor
generator splits as L_rho = L0 + rho * L1 with L1 f = a(y) sqrt(v(y)) f_xy.
The barrier value expands as u(rho) = sum rho^n u_n where u_0 is the
independent-clock value and each u_n solves the killed problem

    (d/dt + L0) u_n = -L1 u_{n-1},  u_n = 0 on the barrier, u_n(T, .) = 0,

equivalently (Duhamel) u_n(t) = E[ int_t^T (L1 u_{n-1})(s, X_s, Y_s)
1{alive} ds ]. Two routes are implemented: a Monte Carlo estimator of the
first-order Duhamel integral under the decoupled dynamics, and an
alternating-direction implicit solver for the forced problems at any order.
Both consume the same semi-analytic mixed derivative of the baseline, built
by differentiating the barrier representations through the conditional clock
transform (d/dy acts on exp(-A - B s(y)) only, d/dx on the trig kernel only).

Coefficients are reported in price units (discounted at the contract
maturity), so C_0 equals the pricing-module value.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .barrier import (BETA, BarrierContract, ContractKind, MarketEnv,
                      _doc_value_forward, _uop_value_forward, dirichlet_grid,
                      dko_coefficients, price_dko)
from .clocks import (CirClock, ClockSpec, ClockTransform, SquaredOuClock,
                     TimeDepCirClock, build_transform_cache,
                     cir_AB_closed_form, clock_digest, conditional_AB,
                     expected_clock, sqou_AB_closed_form, state_map)
from .errors import DomainError, NotComputableError, UnsupportedFamilyError
from .mc import (McConfig, _activity, _block_rng, _blocks, _initial_state,
                 _monitor_step, _variance_step)
from .quadrature import QuadratureConfig, integrate_oscillatory

Array = np.ndarray

ROUTE_BASELINE = "analytic-baseline"
ROUTE_DUHAMEL = "duhamel-mc"
ROUTE_PDE = "forced-pde"

BARRIER_GUARD = 1e-6   # forcing evaluation is refused closer to a barrier


def contract_digest(contract: BarrierContract, market: MarketEnv) -> str:
    blob = (f"{contract.kind.value}|{contract.strike:.15g}|{contract.maturity:.15g}"
            f"|{contract.upper_barrier or 0:.15g}|{contract.lower_barrier or 0:.15g}"
            f"|{market.spot:.15g}|{market.rate:.15g}|{market.dividend:.15g}")
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def leverage_coupling(spec: ClockSpec, y):
    """a(y) sqrt(v(y)): the local strength of the mixed-derivative operator."""
    y = np.asarray(y, dtype=float)
    if isinstance(spec, (CirClock, TimeDepCirClock)):
        xi = spec.xi if isinstance(spec, CirClock) else spec.xi[0]
        return xi * np.maximum(y, 0.0)
    if isinstance(spec, SquaredOuClock):
        return spec.sigma * np.abs(y)
    raise UnsupportedFamilyError(
        f"leverage coupling undefined for {type(spec).__name__}")


def _conditional_AB_fast(spec: ClockSpec, tau: float, lam: Array) -> tuple:
    """(A, B) over a lambda grid for horizon tau; closed forms where they exist."""
    if isinstance(spec, CirClock):
        return cir_AB_closed_form(spec.kappa, spec.theta, spec.xi, tau, lam)
    if isinstance(spec, SquaredOuClock):
        return sqou_AB_closed_form(spec.alpha, spec.sigma, tau, lam)
    return conditional_AB(spec, 0.0, tau, lam)


# --------------------------------------------------------------------------- #
# Single-barrier kernel descriptions
#
# The baseline value is  affine(x) + scale * e^{x/2} * I(x, y) with
#   I = int trig(u, x) c(u) Phi_cond(lam_u; y) du,
# where trig = sin(u (x - l)) for a lower barrier and sin(u (h - x)) for an
# upper one. d/dx of e^{x/2} trig gives e^{x/2} (trig/2 + sgn * u * cos),
# with sgn = +1 (lower) and -1 (upper); d/dy multiplies the integrand by
# -B(tau; lam_u) s'(y).
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class _SingleBarrierKernel:
    barrier_log: float       # l or h
    lower: bool              # True: sin(u(x-l)); False: sin(u(h-x))
    scale: float             # multiplies e^{x/2} * integral
    c_fn: Callable[[Array], Array]

    def trig(self, u: Array, x) -> Array:
        arg = np.multiply.outer(np.asarray(x) - self.barrier_log, u) if np.ndim(x) \
            else u * (x - self.barrier_log)
        return np.sin(arg) if self.lower else np.sin(-arg)

    def dx_trig(self, u: Array, x) -> Array:
        # d/dx [e^{x/2} sin(u(x-l))] = e^{x/2}[sin/2 + u cos]; upper flips cos
        if np.ndim(x):
            arg = np.multiply.outer(np.asarray(x) - self.barrier_log, u)
        else:
            arg = u * (x - self.barrier_log)
        sgn = 1.0 if self.lower else -1.0
        return 0.5 * np.sin(sgn * arg) + sgn * u * np.cos(arg)


def _single_barrier_kernel(contract: BarrierContract, K: float) -> _SingleBarrierKernel:
    if contract.kind is ContractKind.DOWN_OUT_CALL:
        l = math.log(contract.lower_barrier)
        L = contract.lower_barrier
        if K > L:
            return _SingleBarrierKernel(
                barrier_log=l, lower=True, scale=-(2.0 / np.pi) * math.sqrt(K),
                c_fn=lambda u: np.sin(u * (math.log(K) - l)) / (u * u + 0.25))
        return _SingleBarrierKernel(
            barrier_log=l, lower=True,
            scale=(2.0 / np.pi) * (L - K) / math.sqrt(L),
            c_fn=lambda u: u / (u * u + 0.25))
    if contract.kind is ContractKind.UP_OUT_PUT:
        h = math.log(contract.upper_barrier)
        H = contract.upper_barrier
        if K < H:
            return _SingleBarrierKernel(
                barrier_log=h, lower=False, scale=-(2.0 / np.pi) * math.sqrt(K),
                c_fn=lambda u: np.sin(u * (h - math.log(K))) / (u * u + 0.25))
        return _SingleBarrierKernel(
            barrier_log=h, lower=False,
            scale=-(2.0 / np.pi) * (1.0 - K / H) * math.sqrt(H),
            c_fn=lambda u: u / (u * u + 0.25))
    raise DomainError("single-barrier kernel needs a UOP or DOC contract")


def _affine_part(contract: BarrierContract, x) -> Array:
    """Barrier-value component with no y-dependence (drops out of d/dxdy)."""
    ex = np.exp(np.asarray(x, dtype=float))
    if contract.kind is ContractKind.DOWN_OUT_CALL:
        return ex - contract.lower_barrier
    if contract.kind is ContractKind.UP_OUT_PUT:
        K, H = contract.strike, contract.upper_barrier
        return K - K * ex / H
    return np.zeros_like(ex)


# --------------------------------------------------------------------------- #
# Baseline evaluator and point forcing
# --------------------------------------------------------------------------- #

def baseline_u0(t: float, x: float, y: float, contract: BarrierContract,
                market: MarketEnv, spec: ClockSpec,
                cfg: QuadratureConfig | None = None) -> float:
    """Time-t barrier value at state (X_t = x, Y_t = y), discounted to t.

    The state-conditional clock transform is plugged into the same barrier
    representations used at t = 0; at (t=0, x=log F0, y=y0) this reproduces
    the unconditional price.
    """
    T = contract.maturity
    if not 0.0 <= t < T:
        raise DomainError("need 0 <= t < T")
    disc = math.exp(-market.rate * (T - t))
    phi = ClockTransform(spec, T, t=t, state=y)
    F = math.exp(x)
    eps = 1e-12
    if contract.kind is ContractKind.DOWN_OUT_CALL:
        if x <= math.log(contract.lower_barrier) + eps:
            return 0.0
        return disc * _doc_value_forward(F, contract.strike,
                                         contract.lower_barrier, phi, cfg)
    if contract.kind is ContractKind.UP_OUT_PUT:
        if x >= math.log(contract.upper_barrier) - eps:
            return 0.0
        return disc * _uop_value_forward(F, contract.strike,
                                         contract.upper_barrier, phi, cfg)
    # corridor contracts: Dirichlet series with the conditional transform
    if not (math.log(contract.lower_barrier) + eps < x
            < math.log(contract.upper_barrier) - eps):
        return 0.0
    grid = dirichlet_grid(contract.lower_barrier, contract.upper_barrier, 600)
    cache = build_transform_cache(spec, t, T, grid, y=y)
    shifted = MarketEnv(spot=F * math.exp(-(market.rate - market.dividend) * T),
                        rate=market.rate, dividend=market.dividend)
    res = price_dko(contract, shifted, cache)
    return res.price * disc / math.exp(-market.rate * T)


def forcing_mixed_derivative(t: float, x: float, y: float,
                             contract: BarrierContract, market: MarketEnv,
                             spec: ClockSpec,
                             cfg: QuadratureConfig | None = None) -> float:
    """(L1 u0)(t, x, y) = a(y) sqrt(v(y)) d^2 u0 / dx dy, forward-value units.

    Differentiates the barrier kernel in x and the conditional transform in y
    analytically; refuses evaluation within 1e-6 (log) of a barrier, where the
    derivative kernel degrades.
    """
    T = contract.maturity
    if not 0.0 <= t <= T:
        raise DomainError("need 0 <= t <= T")
    tau = T - t
    s_val, ds_val = state_map(spec, y)
    couple = float(leverage_coupling(spec, y))
    if tau == 0.0 or couple == 0.0:
        return 0.0

    if contract.kind in (ContractKind.DKO_CALL, ContractKind.DKO_PUT):
        l = math.log(contract.lower_barrier)
        h = math.log(contract.upper_barrier)
        if min(x - l, h - x) < BARRIER_GUARD:
            raise DomainError("forcing evaluation too close to a barrier")
        a = h - l
        n_terms = 400
        omega = np.arange(1, n_terms + 1) * np.pi / a
        lam = 0.5 * (omega ** 2 + BETA ** 2)
        A_v, B_v = _conditional_AB_fast(spec, tau, lam)
        An = dko_coefficients(contract, n_terms)
        phi_cond = np.exp(np.maximum(-A_v - B_v * s_val, -700.0))
        dx_part = -BETA * np.sin(omega * (x - l)) + omega * np.cos(omega * (x - l))
        series = np.sum(An * dx_part * (-B_v * ds_val) * phi_cond)
        dxy = (2.0 / a) * math.exp(-BETA * x) * series
        return couple * dxy

    kern = _single_barrier_kernel(contract, contract.strike)
    if kern.lower and x - kern.barrier_log < BARRIER_GUARD:
        raise DomainError("forcing evaluation too close to a barrier")
    if not kern.lower and kern.barrier_log - x < BARRIER_GUARD:
        raise DomainError("forcing evaluation too close to a barrier")

    def integrand(u):
        A_v, B_v = _conditional_AB_fast(spec, tau, 0.5 * (u * u + 0.25))
        phi_cond = np.exp(np.maximum(-A_v - B_v * s_val, -700.0))
        return kern.dx_trig(u, x) * kern.c_fn(u) * (-B_v * ds_val) * phi_cond

    span = abs(x - kern.barrier_log) + abs(math.log(contract.strike) - kern.barrier_log)
    val = integrate_oscillatory(integrand, span + 1.0, cfg)
    dxy = kern.scale * math.exp(0.5 * x) * val
    return couple * dxy


# --------------------------------------------------------------------------- #
# Forcing tables: (t, x, y) grids of L1 u0, built by separated quadrature
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ForcingTable:
    """Precomputed (L1 u0) values on a (times, x, y) product grid."""

    times: Array
    x_grid: Array
    y_grid: Array
    values: Array            # (n_times, n_x, n_y)
    clock_key: str
    contract_key: str

    def eval(self, time_index: int, x: Array, y: Array) -> Array:
        """Vectorized bilinear interpolation; zero outside the x range."""
        v = self.values[time_index]
        xg, yg = self.x_grid, self.y_grid
        x = np.asarray(x, dtype=float)
        y = np.clip(np.asarray(y, dtype=float), yg[0], yg[-1])
        inside = (x >= xg[0]) & (x <= xg[-1])
        xc = np.clip(x, xg[0], xg[-1])
        ix = np.clip(np.searchsorted(xg, xc) - 1, 0, len(xg) - 2)
        iy = np.clip(np.searchsorted(yg, y) - 1, 0, len(yg) - 2)
        wx = (xc - xg[ix]) / (xg[ix + 1] - xg[ix])
        wy = (y - yg[iy]) / (yg[iy + 1] - yg[iy])
        out = ((1 - wx) * (1 - wy) * v[ix, iy]
               + wx * (1 - wy) * v[ix + 1, iy]
               + (1 - wx) * wy * v[ix, iy + 1]
               + wx * wy * v[ix + 1, iy + 1])
        return np.where(inside, out, 0.0)


def default_state_grids(contract: BarrierContract, market: MarketEnv,
                        spec: ClockSpec, nx: int = 200, ny: int = 80) -> tuple:
    """Spatial grids sized to the contract geometry and clock dispersion."""
    T = contract.maturity
    x0 = math.log(market.forward(T))
    spread = 6.0 * math.sqrt(max(expected_clock(spec, T), 1e-8))
    if contract.kind is ContractKind.DOWN_OUT_CALL:
        lo = math.log(contract.lower_barrier)
        hi = x0 + spread
    elif contract.kind is ContractKind.UP_OUT_PUT:
        lo = x0 - spread
        hi = math.log(contract.upper_barrier)
    else:
        lo = math.log(contract.lower_barrier)
        hi = math.log(contract.upper_barrier)
    x_grid = np.linspace(lo, hi, nx)

    if isinstance(spec, CirClock):
        y_max = spec.v0 + 8.0 * spec.xi * math.sqrt(spec.v0 * T)
        y_grid = np.linspace(0.0, y_max, ny)
    elif isinstance(spec, SquaredOuClock):
        s_inf = spec.sigma * math.sqrt(T)
        center = spec.y0
        y_grid = np.linspace(center - 8.0 * s_inf, center + 8.0 * s_inf, ny)
    else:
        raise UnsupportedFamilyError(
            f"state grids undefined for {type(spec).__name__}")
    return x_grid, y_grid


def _gauss_legendre_panels(u_max: float, panel_width: float, n_gl: int = 8) -> tuple:
    """Fixed composite Gauss-Legendre rule on [0, u_max]."""
    n_panels = max(int(np.ceil(u_max / panel_width)), 1)
    edges = np.linspace(0.0, u_max, n_panels + 1)
    nodes, weights = np.polynomial.legendre.leggauss(n_gl)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    u = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    w = (half[:, None] * weights[None, :]).ravel()
    return u, w


def build_forcing_table(contract: BarrierContract, market: MarketEnv,
                        spec: ClockSpec, times: Array,
                        x_grid: Optional[Array] = None,
                        y_grid: Optional[Array] = None,
                        mollify: float = 1e-3) -> ForcingTable:
    """Tabulate (L1 u0)(t, x, y) on a product grid for every requested time.

    The mixed derivative separates into an x-trig matrix (time independent),
    per-time diagonal weights carrying B e^{-A} and the quadrature rule, and a
    y-matrix exp(-B s(y)); each time slice is then one small matrix product.
    A Gaussian strike mollifier exp(-u^2 mollify^2 / 2) smooths the payoff
    kink for this derivative evaluation only.
    """
    T = contract.maturity
    times = np.asarray(times, dtype=float)
    if times[0] != 0.0 or times[-1] > T + 1e-12:
        raise DomainError("times must start at 0 and stay within [0, T]")
    if x_grid is None or y_grid is None:
        xg, yg = default_state_grids(contract, market, spec)
        x_grid = xg if x_grid is None else x_grid
        y_grid = yg if y_grid is None else y_grid

    s_map, ds_map = state_map(spec, y_grid)
    couple = leverage_coupling(spec, y_grid)
    nt, nx, ny = len(times), len(x_grid), len(y_grid)
    values = np.zeros((nt, nx, ny))

    if contract.kind in (ContractKind.DKO_CALL, ContractKind.DKO_PUT):
        l = math.log(contract.lower_barrier)
        h = math.log(contract.upper_barrier)
        a = h - l
        n_terms = 400
        omega = np.arange(1, n_terms + 1) * np.pi / a
        lam = 0.5 * (omega ** 2 + BETA ** 2)
        An = dko_coefficients(contract, n_terms)
        arg = np.multiply.outer(x_grid - l, omega)
        GX = (-BETA * np.sin(arg) + omega[None, :] * np.cos(arg)) \
            * np.exp(-BETA * x_grid)[:, None]
        for it, t in enumerate(times):
            tau = T - t
            if tau <= 0.0:
                continue
            A_v, B_v = _conditional_AB_fast(spec, tau, lam)
            EA = np.exp(np.maximum(-A_v, -700.0))
            GY = np.exp(np.maximum(-np.multiply.outer(s_map, B_v), -700.0))
            col = An * B_v * EA * np.exp(-0.5 * (omega * mollify) ** 2)
            dxy = -(2.0 / a) * (GX * col[None, :]) @ GY.T
            values[it] = dxy * (couple * ds_map)[None, :]
        return ForcingTable(times=times, x_grid=np.asarray(x_grid),
                            y_grid=np.asarray(y_grid), values=values,
                            clock_key=clock_digest(spec),
                            contract_key=contract_digest(contract, market))

    kern = _single_barrier_kernel(contract, contract.strike)

    # rows with zero coupling contribute nothing; the smallest state-map value
    # over the live rows bounds every column's y-decay and sizes the u cutoff
    live_rows = np.where(np.abs(couple) > 0)[0]
    s_floor = float(np.min(s_map[live_rows])) if live_rows.size else 1.0
    tau_min = float(min(T - t for t in times if t < T))

    probe = np.geomspace(1.0, 1e6, 400)
    A_p, B_p = _conditional_AB_fast(spec, tau_min, 0.5 * (probe ** 2 + 0.25))
    env = (np.abs(B_p) * np.exp(-A_p - B_p * s_floor
                                - 0.5 * (probe * mollify) ** 2)
           * (0.5 + probe) * np.abs(kern.c_fn(probe)))
    live = np.where(env > 1e-18 * max(env.max(), 1e-300))[0]
    u_max = probe[live[-1]] * 1.1 if live.size else 64.0

    span = float(np.max(np.abs(x_grid - kern.barrier_log)))
    width = np.pi / (2.0 * max(span, 1.0))
    u, w = _gauss_legendre_panels(u_max, width)
    lam = 0.5 * (u * u + 0.25)

    GX = kern.dx_trig(u, x_grid) * np.exp(0.5 * x_grid)[:, None]
    base_col = w * kern.c_fn(u) * np.exp(-0.5 * (u * mollify) ** 2)
    s_live = s_map[live_rows]
    scale_live = (couple * ds_map)[live_rows]

    for it, t in enumerate(times):
        tau = T - t
        if tau <= 0.0:
            continue
        A_v, B_v = _conditional_AB_fast(spec, tau, lam)
        decay = np.exp(np.maximum(-A_v, -700.0))
        col = -base_col * B_v * decay     # d/dy brings down -B s'(y)
        env_col = np.abs(col) * np.exp(-np.minimum(B_v * s_floor, 700.0))
        idx = np.where(env_col > 1e-16 * max(env_col.max(), 1e-300))[0]
        GY = np.exp(np.maximum(-np.multiply.outer(s_live, B_v[idx]), -700.0))
        dxy = kern.scale * (GX[:, idx] * col[idx][None, :]) @ GY.T
        values[it][:, live_rows] = dxy * scale_live[None, :]

    return ForcingTable(times=times, x_grid=np.asarray(x_grid),
                        y_grid=np.asarray(y_grid), values=values,
                        clock_key=clock_digest(spec),
                        contract_key=contract_digest(contract, market))


# --------------------------------------------------------------------------- #
# Route 1: first-order Duhamel Monte Carlo
# --------------------------------------------------------------------------- #

def duhamel_coefficient_1(contract: BarrierContract, market: MarketEnv,
                          spec: ClockSpec, config: McConfig,
                          table: Optional[ForcingTable] = None) -> tuple:
    """(C_1, standard_error) from the first-order Duhamel integral.

    Simulates the decoupled dynamics on the monitoring grid, accumulates the
    forcing along surviving path segments by the trapezoid rule (integrand
    zeroed from the exit step onward), and averages. Price units.
    """
    if not isinstance(spec, (CirClock, SquaredOuClock)):
        raise UnsupportedFamilyError(
            "Duhamel route needs simulable decoupled dynamics (CIR or squared OU)")
    T = contract.maturity
    n_steps = config.n_steps(T)
    dt = T / n_steps
    if table is None:
        table = build_forcing_table(contract, market, spec,
                                    np.linspace(0.0, T, n_steps + 1))
    if len(table.times) != n_steps + 1:
        raise DomainError("forcing table times must match the monitoring grid")

    x0 = math.log(market.forward(T))
    from .mc import _log_barriers
    l, h = _log_barriers(contract)

    sums = []
    n_total = 0
    for block_index, n_block in _blocks(config.n_paths, config.block_size):
        rng = _block_rng(config.seed, block_index)
        y = np.full(n_block, _initial_state(spec))
        x = np.full(n_block, x0)
        alive = np.ones(n_block, dtype=bool)
        f_prev = np.where(alive, table.eval(0, x, y), 0.0)
        integral = np.zeros(n_block)
        for i in range(n_steps):
            zv = rng.standard_normal(n_block)
            y_new = _variance_step(spec, y, dt, zv)
            d_gam = 0.5 * (_activity(spec, y) + _activity(spec, y_new)) * dt
            zx = rng.standard_normal(n_block)
            x_new = x + BETA * d_gam + np.sqrt(d_gam) * zx
            alive = _monitor_step(alive, x, x_new, d_gam, l, h, rng,
                                  config.bridge_correction)
            f_new = np.where(alive, table.eval(i + 1, x_new, y_new), 0.0)
            integral += 0.5 * (f_prev + f_new) * dt
            f_prev = f_new
            x, y = x_new, y_new
        sums.append(integral)
        n_total += n_block

    samples = np.concatenate(sums)
    disc = market.discount(T)
    c1 = disc * float(samples.mean())
    se = disc * float(samples.std() / math.sqrt(n_total))
    return c1, se


# --------------------------------------------------------------------------- #
# Route 2: forced alternating-direction implicit solves
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class PdeConfig:
    nx: int = 200
    ny: int = 80
    nt: int = 250
    theta: float = 0.5
    rannacher_steps: int = 2


@dataclass
class PdeStack:
    """Grid solution of one forced problem at every time slice."""

    times: Array             # ascending t in [0, T]
    x_grid: Array
    y_grid: Array
    values: Array            # (nt+1, nx, ny), values[i] at t = times[i]


def _tridiag_solve_batch(dl: Array, d: Array, du: Array, rhs: Array) -> Array:
    """Thomas algorithm over a batch: all arrays (n_batch, n)."""
    nb, n = rhs.shape
    cp = np.empty_like(d)
    dp = np.empty_like(rhs)
    cp[:, 0] = du[:, 0] / d[:, 0]
    dp[:, 0] = rhs[:, 0] / d[:, 0]
    for i in range(1, n):
        m = d[:, i] - dl[:, i] * cp[:, i - 1]
        cp[:, i] = du[:, i] / m
        dp[:, i] = (rhs[:, i] - dl[:, i] * dp[:, i - 1]) / m
    out = np.empty_like(rhs)
    out[:, -1] = dp[:, -1]
    for i in range(n - 2, -1, -1):
        out[:, i] = dp[:, i] - cp[:, i] * out[:, i + 1]
    return out


class _KilledOperator:
    """Discretized decoupled generator on the product grid (x Dirichlet)."""

    def __init__(self, spec: ClockSpec, x_grid: Array, y_grid: Array):
        self.x_grid, self.y_grid = x_grid, y_grid
        self.dx = x_grid[1] - x_grid[0]
        self.dy = y_grid[1] - y_grid[0]
        if isinstance(spec, CirClock):
            self.v = np.maximum(y_grid, 0.0)
            self.b = spec.kappa * (spec.theta - y_grid)
            self.a2 = spec.xi ** 2 * np.maximum(y_grid, 0.0)
        elif isinstance(spec, SquaredOuClock):
            self.v = y_grid ** 2
            self.b = -spec.alpha * y_grid
            self.a2 = np.full_like(y_grid, spec.sigma ** 2)
        else:
            raise UnsupportedFamilyError(
                f"PDE route undefined for {type(spec).__name__}")
        self._build_y_stencil()

    # ---- x operator: v(y) * (BETA u_x + u_xx / 2), Dirichlet ends ---- #

    def apply_x(self, u: Array) -> Array:
        dx = self.dx
        out = np.zeros_like(u)
        ux = (u[2:, :] - u[:-2, :]) / (2 * dx)
        uxx = (u[2:, :] - 2 * u[1:-1, :] + u[:-2, :]) / dx ** 2
        out[1:-1, :] = self.v[None, :] * (BETA * ux + 0.5 * uxx)
        return out

    def solve_x(self, rhs: Array, coef: float) -> Array:
        """(I - coef * L_x) u = rhs with u = 0 at the x boundaries."""
        nx, ny = rhs.shape
        dx = self.dx
        lo = self.v * (-BETA / (2 * dx) + 0.5 / dx ** 2)
        mid = self.v * (-1.0 / dx ** 2)
        hi = self.v * (BETA / (2 * dx) + 0.5 / dx ** 2)
        n_int = nx - 2
        dl = np.tile(-coef * lo[:, None], (1, n_int))
        d = 1.0 - coef * np.tile(mid[:, None], (1, n_int))
        du = np.tile(-coef * hi[:, None], (1, n_int))
        dl[:, 0] = 0.0
        du[:, -1] = 0.0
        sol = _tridiag_solve_batch(dl, d, du, rhs[1:-1, :].T)
        out = np.zeros_like(rhs)
        out[1:-1, :] = sol.T
        return out

    # ---- y operator: b(y) u_y + a2(y) u_yy / 2, one-sided edges ---- #

    def _build_y_stencil(self):
        ny = len(self.y_grid)
        dy = self.dy
        lo = np.zeros(ny)
        mid = np.zeros(ny)
        hi = np.zeros(ny)
        for j in range(ny):
            b, a2 = self.b[j], self.a2[j]
            if j == 0:
                # degenerate edge: first-order upwind drift only
                mid[j] += -max(b, 0.0) / dy
                hi[j] += max(b, 0.0) / dy
            elif j == ny - 1:
                mid[j] += -max(-b, 0.0) / dy
                lo[j] += max(-b, 0.0) / dy
            else:
                diff = 0.5 * a2 / dy ** 2
                peclet = abs(b) * dy / max(a2, 1e-300)
                if a2 > 0 and peclet <= 2.0:
                    lo[j] += diff - b / (2 * dy)
                    mid[j] += -2 * diff
                    hi[j] += diff + b / (2 * dy)
                else:
                    # local upwinding where convection dominates
                    lo[j] += diff + max(-b, 0.0) / dy
                    mid[j] += -2 * diff - abs(b) / dy
                    hi[j] += diff + max(b, 0.0) / dy
        self._y_lo, self._y_mid, self._y_hi = lo, mid, hi

    def apply_y(self, u: Array) -> Array:
        out = u * self._y_mid[None, :]
        out[:, 1:] += u[:, :-1] * self._y_lo[None, 1:]
        out[:, :-1] += u[:, 1:] * self._y_hi[None, :-1]
        return out

    def solve_y(self, rhs: Array, coef: float) -> Array:
        """(I - coef * L_y) u = rhs; single banded solve for all x rows."""
        ny = len(self.y_grid)
        ab = np.zeros((3, ny))
        ab[0, 1:] = -coef * self._y_hi[:-1]
        ab[1, :] = 1.0 - coef * self._y_mid
        ab[2, :-1] = -coef * self._y_lo[1:]
        return solve_banded((1, 1), ab, rhs.T).T


def forced_pde_solve(forcing_at: Callable[[int], Array], spec: ClockSpec,
                     contract: BarrierContract, market: MarketEnv,
                     x_grid: Array, y_grid: Array, times: Array,
                     config: PdeConfig) -> PdeStack:
    """Solve (d/dt + L0) u = -f backward with zero terminal/barrier data.

    forcing_at(i) returns f on the grid at times[i]. Douglas splitting with
    the configured theta; the first config.rannacher_steps steps run fully
    implicit to damp startup kinks in the forcing.
    """
    op = _KilledOperator(spec, x_grid, y_grid)
    nt = len(times) - 1
    u = np.zeros((len(x_grid), len(y_grid)))
    stack = np.zeros((nt + 1, len(x_grid), len(y_grid)))
    stack[nt] = u  # terminal slice (t = T)

    for step in range(nt):
        i_new = nt - step - 1           # index of the earlier time slice
        dt = times[i_new + 1] - times[i_new]
        theta = 1.0 if step < config.rannacher_steps else config.theta
        f_mid = 0.5 * (forcing_at(i_new + 1) + forcing_at(i_new))
        explicit = u + dt * (op.apply_x(u) + op.apply_y(u) + f_mid)
        y1 = op.solve_x(explicit - theta * dt * op.apply_x(u), theta * dt)
        y2 = op.solve_y(y1 - theta * dt * op.apply_y(u), theta * dt)
        u = y2
        u[0, :] = 0.0
        u[-1, :] = 0.0
        stack[i_new] = u
    return PdeStack(times=times, x_grid=x_grid, y_grid=y_grid, values=stack)


def _grid_value_at(stack: PdeStack, x: float, y: float, time_index: int = 0) -> float:
    xg, yg = stack.x_grid, stack.y_grid
    ix = int(np.clip(np.searchsorted(xg, x) - 1, 0, len(xg) - 2))
    iy = int(np.clip(np.searchsorted(yg, y) - 1, 0, len(yg) - 2))
    wx = (x - xg[ix]) / (xg[ix + 1] - xg[ix])
    wy = (y - yg[iy]) / (yg[iy + 1] - yg[iy])
    v = stack.values[time_index]
    return float((1 - wx) * (1 - wy) * v[ix, iy] + wx * (1 - wy) * v[ix + 1, iy]
                 + (1 - wx) * wy * v[ix, iy + 1] + wx * wy * v[ix + 1, iy + 1])


def mixed_derivative_of_stack(stack: PdeStack, spec: ClockSpec) -> Callable[[int], Array]:
    """Forcing L1 u from a grid solution by central differences."""
    couple = leverage_coupling(spec, stack.y_grid)

    def forcing_at(i: int) -> Array:
        du_dx = np.gradient(stack.values[i], stack.x_grid, axis=0)
        dxy = np.gradient(du_dx, stack.y_grid, axis=1)
        return dxy * couple[None, :]

    return forcing_at


def forced_pde_coefficient(n: int, prior: Optional[PdeStack],
                           contract: BarrierContract, market: MarketEnv,
                           spec: ClockSpec,
                           config: PdeConfig | None = None,
                           forcing_table: Optional[ForcingTable] = None) -> tuple:
    """Order-n expansion coefficient by the forced-PDE route.

    n = 1 uses the semi-analytic forcing table (built here when absent);
    n >= 2 differentiates the prior grid solution. Returns (stack, C_n) with
    C_n in price units.
    """
    if n < 1:
        raise DomainError("forced problems start at order 1")
    config = config or PdeConfig()
    T = contract.maturity
    times = np.linspace(0.0, T, config.nt + 1)

    if n == 1:
        if forcing_table is None:
            x_grid, y_grid = default_state_grids(contract, market, spec,
                                                 config.nx, config.ny)
            forcing_table = build_forcing_table(contract, market, spec, times,
                                                x_grid, y_grid)
        if len(forcing_table.times) != len(times):
            raise DomainError("forcing table grid does not match the PDE grid")
        x_grid, y_grid = forcing_table.x_grid, forcing_table.y_grid
        forcing_at = lambda i: forcing_table.values[i]
    else:
        if prior is None:
            raise DomainError("orders n >= 2 need the prior grid solution")
        x_grid, y_grid, times = prior.x_grid, prior.y_grid, prior.times
        forcing_at = mixed_derivative_of_stack(prior, spec)

    stack = forced_pde_solve(forcing_at, spec, contract, market,
                             x_grid, y_grid, times, config)
    x0 = math.log(market.forward(T))
    y0 = _initial_state(spec)
    c_n = market.discount(T) * _grid_value_at(stack, x0, y0, time_index=0)
    return stack, c_n


# --------------------------------------------------------------------------- #
# Coefficient bundles and the residual indicator
# --------------------------------------------------------------------------- #

@dataclass
class ExpansionCoefficients:
    """Leverage expansion coefficients with provenance, in price units."""

    values: Array
    standard_errors: Array
    routes: tuple
    clock_key: str
    contract_key: str
    c1_pde: Optional[float] = None          # route cross-check value
    field_stacks: Optional[list] = None     # retained PdeStacks (t-indexed)
    spec: Optional[ClockSpec] = None

    @property
    def order(self) -> int:
        return len(self.values) - 1


def compute_expansion(contract: BarrierContract, market: MarketEnv,
                      spec: ClockSpec, baseline_price: float,
                      n_max: int = 2,
                      mc_config: Optional[McConfig] = None,
                      pde_config: Optional[PdeConfig] = None,
                      keep_fields: bool = False,
                      c1_route: str = ROUTE_DUHAMEL) -> ExpansionCoefficients:
    """Assemble C_0..C_{n_max}: analytic baseline, Duhamel-MC first order,
    forced-PDE chain beyond (the PDE chain also cross-checks C_1)."""
    if n_max < 1:
        raise DomainError("expansion needs at least order 1")
    mc_config = mc_config or McConfig(n_paths=50_000, n_steps_per_year=520)
    pde_config = pde_config or PdeConfig()

    values = [baseline_price]
    errors = [0.0]
    routes = [ROUTE_BASELINE]

    stack1, c1_pde = forced_pde_coefficient(1, None, contract, market, spec,
                                            pde_config)
    if c1_route == ROUTE_DUHAMEL:
        c1, se1 = duhamel_coefficient_1(contract, market, spec, mc_config)
        values.append(c1)
        errors.append(se1)
        routes.append(ROUTE_DUHAMEL)
    else:
        values.append(c1_pde)
        errors.append(0.0)
        routes.append(ROUTE_PDE)

    stacks = [stack1]
    prior = stack1
    for n in range(2, n_max + 1):
        prior, c_n = forced_pde_coefficient(n, prior, contract, market, spec,
                                            pde_config)
        values.append(c_n)
        errors.append(0.0)
        routes.append(ROUTE_PDE)
        stacks.append(prior)

    return ExpansionCoefficients(
        values=np.asarray(values), standard_errors=np.asarray(errors),
        routes=tuple(routes), clock_key=clock_digest(spec),
        contract_key=contract_digest(contract, market), c1_pde=c1_pde,
        field_stacks=stacks if keep_fields else None, spec=spec)


def residual_error_indicator(coeffs: ExpansionCoefficients, rho: float,
                             N: Optional[int] = None) -> float:
    """|rho|^{N+1} * int_0^T sup |L1 u_N| ds from retained grid solutions.

    An a posteriori indicator (sup-norm contraction bound), not a certified
    error bound. Requires field data for u_N.
    """
    if rho == 0.0:
        return 0.0
    if coeffs.field_stacks is None or coeffs.spec is None:
        raise NotComputableError(
            "residual indicator needs retained grid solutions; "
            "recompute the expansion with keep_fields=True")
    N = coeffs.order if N is None else N
    if N < 1 or N - 1 >= len(coeffs.field_stacks):
        raise NotComputableError(f"no grid solution retained for order {N}")
    stack = coeffs.field_stacks[N - 1]
    forcing_at = mixed_derivative_of_stack(stack, coeffs.spec)
    sups = np.array([np.max(np.abs(forcing_at(i)))
                     for i in range(len(stack.times))])
    return abs(rho) ** (N + 1) * float(np.trapezoid(sups, stack.times))
