"""Monte Carlo benchmark engine for clock-driven barrier pricing.

Variance paths use the full-truncation Euler scheme for the CIR family
(negative excursions are clipped inside both drift and diffusion) and the
exact Gaussian step for the OU factor of the squared-OU family. The clock is
accumulated by trapezoidal integration, the log-forward is built in
operational time (X = x0 + beta*Gamma + B_Gamma for independent drivers, or
an Euler step with correlated Gaussian increments for rho != 0), and barrier
monitoring applies a per-interval Brownian-bridge crossing probability in
operational time.

Reproducibility: paths are generated in fixed-size blocks, each driven by a
counter-based Philox stream keyed by (seed, block index). Draws inside a
block follow a fixed order, and block partial sums are merged in block order,
so estimates are bit-identical for a given (seed, config) regardless of how
many worker threads execute the blocks.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .barrier import BarrierContract, ContractKind, MarketEnv
from .clocks import CirClock, ClockSpec, SquaredOuClock
from .errors import DomainError, UnsupportedFamilyError

Array = np.ndarray

THREADS_ENV_VAR = "TCBM_NUM_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "")
    if raw.strip():
        return max(1, int(raw))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class McConfig:
    """Simulation size and reproducibility settings."""

    n_paths: int = 100_000
    n_steps_per_year: int = 2080   # 8 observations per business day
    seed: int = 0
    antithetic: bool = False
    block_size: int = 50_000
    bridge_correction: bool = True

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps_per_year < 1 or self.block_size < 1:
            raise DomainError("n_paths, n_steps_per_year, block_size must be >= 1")

    def n_steps(self, T: float) -> int:
        return max(int(round(self.n_steps_per_year * T)), 1)


@dataclass(frozen=True)
class McEstimate:
    price: float
    standard_error: float
    n_paths: int
    knockout_fraction: float


def _block_rng(seed: int, block_index: int) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(block_index)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _blocks(n_paths: int, block_size: int):
    start = 0
    idx = 0
    while start < n_paths:
        yield idx, min(block_size, n_paths - start)
        start += block_size
        idx += 1


# --------------------------------------------------------------------------- #
# Path schemes
# --------------------------------------------------------------------------- #

def _variance_step(spec: ClockSpec, v: Array, dt: float, z: Array) -> Array:
    """One variance-path step; returns the raw (untruncated) next state."""
    if isinstance(spec, CirClock):
        vp = np.maximum(v, 0.0)
        return v + spec.kappa * (spec.theta - vp) * dt \
            + spec.xi * np.sqrt(vp * dt) * z
    if isinstance(spec, SquaredOuClock):
        decay = math.exp(-spec.alpha * dt)
        scale = spec.sigma * math.sqrt((1.0 - math.exp(-2.0 * spec.alpha * dt))
                                       / (2.0 * spec.alpha))
        return v * decay + scale * z
    raise UnsupportedFamilyError(
        f"simulation not available for {type(spec).__name__}")


def _activity(spec: ClockSpec, state: Array) -> Array:
    """Instantaneous variance from the factor state (clipped where needed)."""
    if isinstance(spec, CirClock):
        return np.maximum(state, 0.0)
    return state * state  # squared OU


def _initial_state(spec: ClockSpec) -> float:
    return spec.v0 if isinstance(spec, CirClock) else spec.y0


def simulate_clock_path(spec: ClockSpec, T: float, n_steps: int,
                        rng: np.random.Generator, n_paths: int = 1) -> tuple:
    """Simulate factor and clock paths on the uniform grid over [0, T].

    Returns (states, clock) of shape (n_paths, n_steps + 1); clock rows are
    non-decreasing by construction (trapezoid of clipped activity).
    """
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    dt = T / n_steps
    states = np.empty((n_paths, n_steps + 1))
    clock = np.empty((n_paths, n_steps + 1))
    y = np.full(n_paths, _initial_state(spec))
    states[:, 0] = y
    clock[:, 0] = 0.0
    gam = np.zeros(n_paths)
    for i in range(n_steps):
        z = rng.standard_normal(n_paths)
        y_new = _variance_step(spec, y, dt, z)
        gam = gam + 0.5 * (_activity(spec, y) + _activity(spec, y_new)) * dt
        states[:, i + 1] = y_new
        clock[:, i + 1] = gam
        y = y_new
    return states, clock


# --------------------------------------------------------------------------- #
# Barrier payoff plumbing
# --------------------------------------------------------------------------- #

def _payoff(contract: BarrierContract, x_T: Array) -> Array:
    S = np.exp(x_T)
    K = contract.strike
    if contract.kind in (ContractKind.DOWN_OUT_CALL, ContractKind.DKO_CALL):
        return np.maximum(S - K, 0.0)
    return np.maximum(K - S, 0.0)


def _log_barriers(contract: BarrierContract) -> tuple:
    h = math.log(contract.upper_barrier) if contract.upper_barrier else None
    l = math.log(contract.lower_barrier) if contract.lower_barrier else None
    if contract.kind is ContractKind.UP_OUT_PUT:
        l = None
    if contract.kind is ContractKind.DOWN_OUT_CALL:
        h = None
    return l, h


def _monitor_step(alive: Array, x_old: Array, x_new: Array, d_gam: Array,
                  l: Optional[float], h: Optional[float],
                  rng: np.random.Generator, bridge: bool) -> Array:
    """Update the alive mask for one interval; draws one uniform per barrier."""
    crossed = np.zeros_like(alive)
    if h is not None:
        hit = (x_new >= h) | (x_old >= h)
        if bridge:
            u = rng.random(x_old.shape[0])
            with np.errstate(divide="ignore", over="ignore"):
                p = np.where((~hit) & (d_gam > 0.0),
                             np.exp(-2.0 * (h - x_old) * (h - x_new)
                                    / np.where(d_gam > 0, d_gam, 1.0)),
                             0.0)
            hit = hit | (u < p)
        crossed |= hit
    if l is not None:
        hit = (x_new <= l) | (x_old <= l)
        if bridge:
            u = rng.random(x_old.shape[0])
            with np.errstate(divide="ignore", over="ignore"):
                p = np.where((~hit) & (d_gam > 0.0),
                             np.exp(-2.0 * (x_old - l) * (x_new - l)
                                    / np.where(d_gam > 0, d_gam, 1.0)),
                             0.0)
            hit = hit | (u < p)
        crossed |= hit
    return alive & ~crossed


def _simulate_block(contract: BarrierContract, market: MarketEnv,
                    spec: ClockSpec, config: McConfig, block_index: int,
                    n_block: int, rho: Optional[float]) -> tuple:
    """One block of paths; returns (sum, sum_sq, n_pairs_or_paths, knocked)."""
    T = contract.maturity
    n_steps = config.n_steps(T)
    dt = T / n_steps
    x0 = math.log(market.forward(T))
    l, h = _log_barriers(contract)
    beta = -0.5

    if config.antithetic:
        n_base = (n_block + 1) // 2
    else:
        n_base = n_block

    def run(sign: float) -> tuple:
        y = np.full(n_base, _initial_state(spec))
        x = np.full(n_base, x0)
        alive = np.ones(n_base, dtype=bool)
        rng_local = _block_rng(config.seed, block_index)
        if rho is None:
            for _ in range(n_steps):
                zv = sign * rng_local.standard_normal(n_base)
                y_new = _variance_step(spec, y, dt, zv)
                d_gam = 0.5 * (_activity(spec, y) + _activity(spec, y_new)) * dt
                zx = sign * rng_local.standard_normal(n_base)
                x_new = x + beta * d_gam + np.sqrt(d_gam) * zx
                alive = _monitor_step(alive, x, x_new, d_gam, l, h, rng_local,
                                      config.bridge_correction)
                y, x = y_new, x_new
        else:
            rho_c = math.sqrt(max(1.0 - rho * rho, 0.0))
            for _ in range(n_steps):
                zv = sign * rng_local.standard_normal(n_base)
                zp = sign * rng_local.standard_normal(n_base)
                zs = rho * zv + rho_c * zp
                v_now = _activity(spec, y)
                y_new = _variance_step(spec, y, dt, zv)
                d_gam = 0.5 * (v_now + _activity(spec, y_new)) * dt
                x_new = x + beta * v_now * dt + np.sqrt(v_now * dt) * zs
                alive = _monitor_step(alive, x, x_new, d_gam, l, h, rng_local,
                                      config.bridge_correction)
                y, x = y_new, x_new
        pay = np.where(alive, _payoff(contract, x), 0.0)
        return pay, alive

    if config.antithetic:
        pay_a, alive_a = run(+1.0)
        pay_b, alive_b = run(-1.0)
        pair = 0.5 * (pay_a + pay_b)
        knocked = (~alive_a).sum() + (~alive_b).sum()
        return (float(pair.sum()), float((pair * pair).sum()), n_base,
                int(knocked), 2 * n_base)
    pay, alive = run(+1.0)
    return (float(pay.sum()), float((pay * pay).sum()), n_base,
            int((~alive).sum()), n_base)


def _price_barrier_mc(contract: BarrierContract, market: MarketEnv,
                      spec: ClockSpec, config: McConfig,
                      rho: Optional[float]) -> McEstimate:
    if not isinstance(spec, (CirClock, SquaredOuClock)):
        raise UnsupportedFamilyError(
            "Monte Carlo pricing supports the CIR and squared-OU families")
    T = contract.maturity
    F0 = market.forward(T)
    if contract.upper_barrier and F0 >= contract.upper_barrier:
        return McEstimate(0.0, 0.0, config.n_paths, 1.0)
    if contract.lower_barrier and contract.kind is not ContractKind.UP_OUT_PUT \
            and F0 <= contract.lower_barrier:
        return McEstimate(0.0, 0.0, config.n_paths, 1.0)

    blocks = list(_blocks(config.n_paths, config.block_size))
    workers = min(worker_count(), len(blocks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda b: _simulate_block(contract, market, spec, config,
                                          b[0], b[1], rho), blocks))
    else:
        results = [_simulate_block(contract, market, spec, config, b, n, rho)
                   for b, n in blocks]

    # deterministic merge in block order
    total = 0.0
    total_sq = 0.0
    n_units = 0
    knocked = 0
    n_simulated = 0
    for (s, s2, units, k, n_sim) in results:
        total += s
        total_sq += s2
        n_units += units
        knocked += k
        n_simulated += n_sim

    disc = market.discount(T)
    mean = total / n_units
    var = max(total_sq / n_units - mean * mean, 0.0)
    se = disc * math.sqrt(var / n_units)
    return McEstimate(price=disc * mean, standard_error=se,
                      n_paths=n_simulated,
                      knockout_fraction=knocked / n_simulated)


def price_barrier_mc_rho0(contract: BarrierContract, market: MarketEnv,
                          spec: ClockSpec, config: McConfig) -> McEstimate:
    """Independent-driver benchmark: clock first, then Brownian increments
    with variance d Gamma, bridge-corrected monitoring in operational time."""
    return _price_barrier_mc(contract, market, spec, config, rho=None)


def price_barrier_mc_correlated(contract: BarrierContract, market: MarketEnv,
                                spec: ClockSpec, rho: float,
                                config: McConfig) -> McEstimate:
    """Correlated-driver benchmark via the orthogonal decomposition
    Z_S = rho Z_v + sqrt(1 - rho^2) Z_perp; Euler in calendar time with the
    step-start variance in both drift and diffusion."""
    if not -1.0 <= rho <= 1.0:
        raise DomainError("rho must lie in [-1, 1]")
    return _price_barrier_mc(contract, market, spec, config, rho=float(rho))
