"""Staged calibration: initializers, weighted least squares, cached-rho fit.

Workflow (staged for stability):
  1. clock parameters from vanillas alone, decoupled drivers;
  2. refinement including barrier quotes, still decoupled;
  3. leverage fit: expansion coefficients cached per barrier instrument at the
     fitted clock, then a one-dimensional search over rho through the cached
     polynomial/rational evaluators (no re-pricing inside the scan);
  4. a short joint polish with mild anchoring penalties, leverage corrections
     kept frozen at their stage-3 coefficients.

Initializers follow the "mean from variance swaps, dispersion from ATM"
logic: v0 from the shortest variance-swap maturity, theta profiled at the
longest, kappa by a one-dimensional golden-section fit of the mean-curve
shape; the vol-of-vol scale then matches the model ATM total variance at the
middle maturity by bisection. A two-factor fast/slow seed runs nonnegative
linear least squares for the mean-curve contributions on a coarse grid of
mean-reversion pairs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar, nnls

from .barrier import (BarrierContract, ContractKind, MarketEnv, dirichlet_grid,
                      price_dko, price_doc, price_uop)
from .clocks import (CirClock, ClockSpec, ClockTransform, SquaredOuClock,
                     TwoFactorCirClock, build_transform_cache)
from .errors import DomainError, TcbmError
from .leverage import PdeConfig, compute_expansion
from .mc import McConfig
from .pade import FallbackPolicy, evaluate_with_fallback
from .vanilla import (VanillaQuote, atm_total_variance, cos_vanilla_price,
                      implied_vol, variance_swap_strike)

Array = np.ndarray

PENALTY_RESIDUAL = 1e3


@dataclass(frozen=True)
class BarrierQuote:
    contract: BarrierContract
    value: float
    weight: float = 1.0
    leverage_sensitive: bool = True

    def __post_init__(self):
        if self.weight < 0:
            raise DomainError("weight must be >= 0")


@dataclass(frozen=True)
class VarSwapQuote:
    maturity: float
    strike: float          # annualized variance


@dataclass(frozen=True)
class VixProxyQuote:
    maturity: float
    value: float           # annualized forward variance over the window
    window: float = 30.0 / 365.0


@dataclass
class CalibrationDataset:
    market: MarketEnv
    vanillas: list
    barriers: list = field(default_factory=list)
    varswaps: list = field(default_factory=list)
    vix_proxies: list = field(default_factory=list)

    def __post_init__(self):
        if not self.vanillas:
            raise DomainError("dataset needs at least one vanilla maturity")


@dataclass
class CalibrationResult:
    spec: ClockSpec
    rho: float
    stage_objectives: dict
    residuals: dict
    flags: list
    rho_routes: dict = field(default_factory=dict)


# --------------------------------------------------------------------------- #
# Parameterizations (bijective on their domains)
# --------------------------------------------------------------------------- #

def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


class Parameterization:
    """Unconstrained <-> native parameter maps per clock family."""

    def __init__(self, family: str, w_bounds: tuple = (0.2, 0.8)):
        if family not in ("cir", "cir2", "sqou"):
            raise DomainError(f"unsupported calibration family '{family}'")
        self.family = family
        self.w_bounds = w_bounds

    def to_unconstrained(self, spec: ClockSpec) -> Array:
        if self.family == "cir":
            return np.log([spec.v0, spec.theta, spec.kappa, spec.xi])
        if self.family == "sqou":
            return np.array([spec.y0, math.log(spec.alpha), math.log(spec.sigma)])
        lo, hi = self.w_bounds
        w = min(max(spec.weight, lo + 1e-9), hi - 1e-9)
        kf, ks = spec.fast.kappa, spec.slow.kappa
        return np.array([
            math.log(spec.fast.v0), math.log(spec.fast.theta),
            math.log(spec.slow.v0), math.log(spec.slow.theta),
            math.log(ks), math.log(kf - ks),          # ordering-preserving
            math.log(spec.fast.xi), math.log(spec.slow.xi),
            _logit((w - lo) / (hi - lo)),
        ])

    def from_unconstrained(self, z: Array) -> ClockSpec:
        z = np.asarray(z, dtype=float)
        if self.family == "cir":
            v0, th, k, xi = np.exp(z)
            return CirClock(kappa=k, theta=th, xi=xi, v0=v0)
        if self.family == "sqou":
            return SquaredOuClock(alpha=math.exp(z[1]), sigma=math.exp(z[2]),
                                  y0=float(z[0]))
        lo, hi = self.w_bounds
        ks = math.exp(z[4])
        kf = ks + math.exp(z[5])
        w = lo + (hi - lo) * _sigmoid(z[8])
        fast = CirClock(kappa=kf, theta=math.exp(z[1]), xi=math.exp(z[6]),
                        v0=math.exp(z[0]))
        slow = CirClock(kappa=ks, theta=math.exp(z[3]), xi=math.exp(z[7]),
                        v0=math.exp(z[2]))
        return TwoFactorCirClock(fast=fast, slow=slow, weight=w)


# --------------------------------------------------------------------------- #
# Objective
# --------------------------------------------------------------------------- #

def _barrier_price_rho0(contract: BarrierContract, market: MarketEnv,
                        spec: ClockSpec) -> float:
    T = contract.maturity
    phi = ClockTransform(spec, T)
    if contract.kind is ContractKind.DOWN_OUT_CALL:
        return price_doc(contract, market, phi)
    if contract.kind is ContractKind.UP_OUT_PUT:
        return price_uop(contract, market, phi)
    cache = build_transform_cache(
        spec, 0.0, T, dirichlet_grid(contract.lower_barrier,
                                     contract.upper_barrier, 800))
    return price_dko(contract, market, cache).price


def objective_eval(spec: ClockSpec, dataset: CalibrationDataset,
                   rho: float = 0.0, vol_space: bool = True,
                   coeff_cache: Optional[dict] = None,
                   barrier_weight_scale: float = 1.0,
                   relative_barriers: bool = True,
                   flags: Optional[list] = None) -> float:
    """Weighted squared-error objective over every quoted instrument.

    Vanilla residuals are measured in implied-vol space when the quote carries
    a vol (and vol_space is set), else in price space. Barrier residuals are
    relative by default so they stay commensurate with vol-space vanilla
    residuals (equivalent to inverse-quote-squared weighting). Barrier model
    values use the decoupled analytic layer at rho = 0 and the cached
    expansion coefficients otherwise. Pricing failures add a fixed penalty
    residual and a flag instead of silently vanishing.
    """
    flags = flags if flags is not None else []
    total = 0.0
    market = dataset.market
    for q in dataset.vanillas:
        if q.weight == 0.0:
            continue
        try:
            model_price = cos_vanilla_price(spec, market, q)
            if vol_space and q.implied_vol is not None:
                model = implied_vol(model_price, market, q)
                quoted = q.implied_vol
            else:
                model = model_price
                quoted = q.price if q.price is not None else \
                    (0.0 if q.implied_vol is None else q.implied_vol)
        except TcbmError as exc:
            flags.append(f"vanilla({q.maturity:g},{q.strike:g}): {exc}")
            total += q.weight * PENALTY_RESIDUAL ** 2
            continue
        total += q.weight * (model - quoted) ** 2

    for bq in dataset.barriers:
        if bq.weight == 0.0:
            continue
        key = _barrier_key(bq.contract)
        try:
            if rho == 0.0 or coeff_cache is None or key not in coeff_cache:
                if rho != 0.0 and bq.leverage_sensitive:
                    if coeff_cache is not None:
                        flags.append(f"barrier {key}: no cached coefficients")
                        total += barrier_weight_scale * bq.weight * PENALTY_RESIDUAL ** 2
                        continue
                model = _barrier_price_rho0(bq.contract, market, spec)
            else:
                model, _ = evaluate_with_fallback(coeff_cache[key], rho)
        except TcbmError as exc:
            flags.append(f"barrier {key}: {exc}")
            total += barrier_weight_scale * bq.weight * PENALTY_RESIDUAL ** 2
            continue
        resid = model - bq.value
        if relative_barriers and abs(bq.value) > 1e-12:
            resid /= bq.value
        total += barrier_weight_scale * bq.weight * resid ** 2
    return total


def _barrier_key(contract: BarrierContract) -> str:
    return (f"{contract.kind.value}:{contract.strike:g}:{contract.maturity:g}:"
            f"{contract.lower_barrier or 0:g}:{contract.upper_barrier or 0:g}")


# --------------------------------------------------------------------------- #
# Initializers
# --------------------------------------------------------------------------- #

_INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_section(f: Callable[[float], float], lo: float, hi: float,
                    tol: float = 1e-10) -> float:
    """Bounded golden-section minimization of a unimodal scalar function."""
    a, b = lo, hi
    c = b - _INV_GOLDEN * (b - a)
    d = a + _INV_GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol * (1.0 + abs(a) + abs(b)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def init_cir_from_varswaps(varswaps: Sequence[VarSwapQuote]) -> tuple:
    """(v0, theta, kappa, flags) from a variance-swap term structure.

    v0 is read off the shortest maturity, theta is profiled by exact
    inversion at the longest maturity for each trial kappa, and kappa runs a
    golden-section search on log kappa in [log 0.01, log 20].
    """
    if len(varswaps) < 3:
        raise DomainError("variance-swap initializer needs >= 3 maturities")
    quotes = sorted(varswaps, key=lambda q: q.maturity)
    T = np.array([q.maturity for q in quotes])
    K = np.array([q.strike for q in quotes])
    flags = []
    if float(K[0]) <= 0:
        raise DomainError("non-positive short-end variance level")

    if np.max(K) - np.min(K) < 1e-10 * max(np.mean(K), 1e-12):
        flags.append("flat-variance-curve: kappa unidentifiable, defaulted to 1.0")
        return float(K[0]), float(np.mean(K)), 1.0, flags

    def g(kappa, t):
        return (1.0 - np.exp(-kappa * t)) / (kappa * t)

    def levels_of(kappa):
        # strike curve is linear in (v0, theta): pin them exactly at the
        # shortest and longest maturities for each trial kappa
        g0, gl = g(kappa, T[0]), g(kappa, T[-1])
        det = g0 * (1.0 - gl) - gl * (1.0 - g0)
        if abs(det) < 1e-14:
            return None
        v0 = (K[0] * (1.0 - gl) - K[-1] * (1.0 - g0)) / det
        th = (K[-1] * g0 - K[0] * gl) / det
        return v0, th

    def sse(log_kappa):
        kappa = math.exp(log_kappa)
        lv = levels_of(kappa)
        if lv is None or lv[0] <= 0 or lv[1] <= 0:
            return 1e12
        v0, th = lv
        model = th + (v0 - th) * g(kappa, T)
        return float(np.sum((model - K) ** 2))

    kappa = math.exp(_golden_section(sse, math.log(0.01), math.log(20.0)))
    lv = levels_of(kappa)
    if lv is None or lv[0] <= 0 or lv[1] <= 0:
        raise DomainError("variance-swap initializer produced non-positive "
                          "levels; inspect the input curve")
    v0, theta = float(lv[0]), float(lv[1])
    return v0, theta, kappa, flags


def init_vol_of_vol_from_atm(spec_builder: Callable[[float], ClockSpec],
                             market: MarketEnv, maturity: float,
                             target_total_variance: float,
                             lo: float = 0.01, hi: float = 2.5) -> float:
    """1-d bisection on the dispersion scale so the model ATM total variance
    matches the market at one reference maturity."""

    def gap(scale):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            spec = spec_builder(scale)
            return atm_total_variance(spec, market, maturity) - target_total_variance

    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo * g_hi > 0:
        return lo if abs(g_lo) < abs(g_hi) else hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        g_mid = gap(mid)
        if abs(g_mid) < 1e-10:
            return mid
        if g_lo * g_mid <= 0:
            hi, g_hi = mid, g_mid
        else:
            lo, g_lo = mid, g_mid
    return 0.5 * (lo + hi)


def init_two_factor_grid(varswaps: Sequence[VarSwapQuote],
                         vix_proxies: Sequence[VixProxyQuote] = (),
                         w_bounds: tuple = (0.2, 0.8),
                         kappa_fast_grid: Sequence[float] = (0.5, 1.0, 2.0, 4.0, 7.0, 10.0),
                         kappa_slow_grid: Sequence[float] = (0.05, 0.1, 0.2, 0.35, 0.6, 1.0),
                         vix_scale: float = 1.0) -> tuple:
    """Two-factor fast/slow seed from mean-curve targets.

    For each (kappa_f, kappa_s) pair with kappa_f > kappa_s, solve a
    nonnegative linear least-squares for the contributions
    (w theta_f, w v0_f, (1-w) theta_s, (1-w) v0_s), pick the best pair, and
    allocate through fractions with the weight clipped to w_bounds.
    Returns (TwoFactorCirClock, diagnostics dict).
    """
    if len(varswaps) < 3:
        raise DomainError("two-factor initializer needs >= 3 variance maturities")
    rows = []
    targets = []
    for q in varswaps:
        T = q.maturity
        rows.append(("vs", T, None))
        targets.append(q.strike)
    for q in vix_proxies:
        rows.append(("vix", q.maturity, q.window))
        targets.append(q.value * vix_scale)
    targets = np.asarray(targets)

    def g_avg(kappa, T):
        return (1.0 - math.exp(-kappa * T)) / (kappa * T)

    def g_fwd(kappa, T, dT):
        return (math.exp(-kappa * T) - math.exp(-kappa * (T + dT))) / (kappa * dT)

    best = None
    for kf in kappa_fast_grid:
        for ks in kappa_slow_grid:
            if kf <= ks:
                continue
            A = np.zeros((len(rows), 4))
            for i, (kind, T, dT) in enumerate(rows):
                gf = g_avg(kf, T) if kind == "vs" else g_fwd(kf, T, dT)
                gs = g_avg(ks, T) if kind == "vs" else g_fwd(ks, T, dT)
                A[i] = [1.0 - gf, gf, 1.0 - gs, gs]
            q_sol, err = nnls(A, targets)
            if best is None or err < best[0]:
                best = (err, kf, ks, q_sol)

    if best is None:
        raise DomainError("empty mean-reversion grid")
    err, kf, ks, (q1, q2, q3, q4) = best
    diagnostics = {"grid_error": float(err), "kappa_fast": kf, "kappa_slow": ks,
                   "contributions": (float(q1), float(q2), float(q3), float(q4))}

    # degeneracy check: when one factor alone explains the targets equally
    # well, the two-factor split is not identified
    A_best = np.zeros((len(rows), 4))
    for i, (kind, T, dT) in enumerate(rows):
        gf = g_avg(kf, T) if kind == "vs" else g_fwd(kf, T, dT)
        gs = g_avg(ks, T) if kind == "vs" else g_fwd(ks, T, dT)
        A_best[i] = [1.0 - gf, gf, 1.0 - gs, gs]
    scale = float(np.sum(targets ** 2))
    _, err_fast_only = nnls(A_best[:, :2], targets)
    _, err_slow_only = nnls(A_best[:, 2:], targets)
    single_err = min(err_fast_only, err_slow_only)
    if single_err ** 2 <= max(4.0 * err ** 2, 1e-16 * scale):
        diagnostics["near_single_factor"] = True

    theta_tot = q1 + q3
    v0_tot = q2 + q4
    if theta_tot <= 0 or v0_tot <= 0 or min(q1, q3) < 1e-10 * theta_tot:
        # effectively one active factor: no usable two-factor split
        diagnostics["fallback_one_factor"] = True
        v0, th, kappa, flags = init_cir_from_varswaps(varswaps)
        diagnostics["alpha_fast"] = 1.0 if q1 >= q3 else 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            xi = min(0.3, 0.9 * math.sqrt(2 * kappa * th))
            fast = CirClock(kappa=max(kappa * 4, ks * 2 + 0.5), theta=th,
                            xi=xi, v0=v0)
            slow = CirClock(kappa=max(kappa / 2, 0.02), theta=th, xi=xi, v0=v0)
            seed = TwoFactorCirClock(fast=fast, slow=slow,
                                     weight=0.5 * sum(w_bounds))
        return seed, diagnostics

    alpha_fast = q1 / theta_tot
    diagnostics["alpha_fast"] = float(alpha_fast)
    w = float(np.clip(alpha_fast, *w_bounds))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fast = CirClock(kappa=kf, theta=max(q1 / w, 1e-8),
                        xi=min(0.3, 0.9 * math.sqrt(2 * kf * max(q1 / w, 1e-8))),
                        v0=max(q2 / w, 1e-8))
        slow = CirClock(kappa=ks, theta=max(q3 / (1 - w), 1e-8),
                        xi=min(0.3, 0.9 * math.sqrt(2 * ks * max(q3 / (1 - w), 1e-8))),
                        v0=max(q4 / (1 - w), 1e-8))
        seed = TwoFactorCirClock(fast=fast, slow=slow, weight=w)
    return seed, diagnostics


# --------------------------------------------------------------------------- #
# Cached-coefficient rho fit
# --------------------------------------------------------------------------- #

def fit_rho_cached(coeff_sets: dict, quotes: Sequence[BarrierQuote],
                   policy: Optional[FallbackPolicy] = None,
                   bounds: tuple = (-0.99, 0.99)) -> tuple:
    """argmin over rho of the quote SSE through cached expansion evaluators.

    Returns (rho, report) where report holds per-instrument routes at the
    optimum and an extrapolation-risk flag when every instrument fell back
    below its top rational order.
    """
    live = [q for q in quotes if q.weight > 0 and q.leverage_sensitive]
    if not live:
        raise DomainError("no leverage-sensitive quotes to fit rho against")
    for q in live:
        if _barrier_key(q.contract) not in coeff_sets:
            raise DomainError(f"missing cached coefficients for {_barrier_key(q.contract)}")

    def sse(rho):
        total = 0.0
        for q in live:
            val, _ = evaluate_with_fallback(coeff_sets[_barrier_key(q.contract)],
                                            float(rho), policy)
            total += q.weight * (val - q.value) ** 2
        return total

    res = minimize_scalar(sse, bounds=bounds, method="bounded",
                          options={"xatol": 1e-6})
    rho = float(res.x)
    routes = {}
    for q in live:
        _, route = evaluate_with_fallback(coeff_sets[_barrier_key(q.contract)],
                                          rho, policy)
        routes[_barrier_key(q.contract)] = route
    report = {"routes": routes, "objective": float(res.fun), "flags": []}
    pol = policy or FallbackPolicy()

    def below_feasible_top(q):
        n_avail = len(coeff_sets[_barrier_key(q.contract)]) - 1
        feasible = [o for o in pol.orders if o[0] + o[1] <= n_avail]
        if not feasible:
            return True
        top = feasible[0]
        return routes[_barrier_key(q.contract)] != f"pade[{top[0]}/{top[1]}]"

    if rho != 0.0 and all(below_feasible_top(q) for q in live):
        report["flags"].append("rho-fit-extrapolation-risk: every instrument "
                               "fell back below its top rational order")
    return rho, report


# --------------------------------------------------------------------------- #
# Stage pipeline
# --------------------------------------------------------------------------- #

@dataclass
class PipelineConfig:
    stages: str = "1234"
    vol_space: bool = True
    barrier_weight_scale: float = 0.25
    coeff_orders: int = 2
    mc_config: McConfig = field(default_factory=lambda: McConfig(
        n_paths=20_000, n_steps_per_year=260, seed=1234))
    pde_config: PdeConfig = field(default_factory=lambda: PdeConfig(
        nx=140, ny=56, nt=140))
    stage4_maxiter: int = 3    # bounded joint polish; must stay <= 20
    anchor_penalty: float = 1e-6
    stage2_anchor: float = 1e-3   # keeps the barrier refinement a refinement
    initial_spec: Optional[ClockSpec] = None

    def __post_init__(self):
        if self.stage4_maxiter > 20:
            raise DomainError("the joint polish is capped at 20 iterations")


def _market_atm_total_variance(dataset: CalibrationDataset,
                               T: float) -> Optional[float]:
    """Implied total variance of the quote nearest to the ATM forward at T."""
    market = dataset.market
    best = None
    for q in dataset.vanillas:
        vol = q.implied_vol
        if vol is None and q.price is not None:
            try:
                vol = implied_vol(q.price, market, q)
            except TcbmError:
                continue
        if vol is None:
            continue
        dist = (abs(q.maturity - T), abs(q.strike - market.forward(q.maturity)))
        if best is None or dist < best[0]:
            best = (dist, vol * vol * q.maturity)
    return None if best is None else best[1]


def _default_seed(family: str, dataset: CalibrationDataset) -> ClockSpec:
    market = dataset.market
    if family in ("cir", "sqou") and len(dataset.varswaps) >= 3:
        v0, th, kappa, _ = init_cir_from_varswaps(dataset.varswaps)
    else:
        # fall back to a flat seed at the ATM implied variance level
        q = dataset.vanillas[len(dataset.vanillas) // 2]
        try:
            level = (q.implied_vol or 0.2) ** 2
        except TypeError:
            level = 0.04
        v0 = th = max(level, 1e-4)
        kappa = 1.0
    mats = sorted({q.maturity for q in dataset.vanillas})
    mid_T = mats[len(mats) // 2]
    if family == "cir":
        # dispersion scale from the market ATM convexity at the middle maturity
        target = _market_atm_total_variance(dataset, mid_T)
        if target is None:
            target = th * mid_T
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            xi = init_vol_of_vol_from_atm(
                lambda s: CirClock(kappa=kappa, theta=th, xi=s, v0=v0),
                market, mid_T, target)
            return CirClock(kappa=kappa, theta=th, xi=max(xi, 0.05), v0=v0)
    if family == "sqou":
        return SquaredOuClock(alpha=kappa, sigma=max(math.sqrt(th * kappa), 0.05),
                              y0=math.sqrt(v0))
    seed, _diag = init_two_factor_grid(dataset.varswaps or
                                       [VarSwapQuote(t, th) for t in (0.25, 1.0, 3.0)],
                                       dataset.vix_proxies)
    return seed


def run_stage_pipeline(dataset: CalibrationDataset, family: str,
                       config: Optional[PipelineConfig] = None) -> CalibrationResult:
    """Run the staged fit; stages absent from config.stages are skipped.

    Stage results are accepted only when the full-dataset objective does not
    increase; rejected stages keep the prior parameters and raise a flag.
    """
    config = config or PipelineConfig()
    param = Parameterization(family)
    flags: list = []
    stage_objectives: dict = {}
    rho = 0.0
    coeff_cache: dict = {}
    rho_routes: dict = {}

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        spec = config.initial_spec or _default_seed(family, dataset)

    def full_objective(s, r, cache=None):
        return objective_eval(s, dataset, rho=r, vol_space=config.vol_space,
                              coeff_cache=cache,
                              barrier_weight_scale=config.barrier_weight_scale,
                              flags=[])

    current_obj = full_objective(spec, 0.0)
    stage_objectives["init"] = current_obj

    has_barriers = any(q.weight > 0 for q in dataset.barriers)

    def powell_fit(start_spec, include_barriers, maxiter=None, anchor=None,
                   anchor_scale=None):
        z0 = param.to_unconstrained(start_spec)

        def obj(z):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    s = param.from_unconstrained(z)
            except TcbmError:
                return 1e12
            ds = dataset if include_barriers else CalibrationDataset(
                market=dataset.market, vanillas=dataset.vanillas)
            val = objective_eval(s, ds, rho=0.0, vol_space=config.vol_space,
                                 barrier_weight_scale=config.barrier_weight_scale,
                                 flags=[])
            if anchor is not None:
                scale = config.anchor_penalty if anchor_scale is None else anchor_scale
                val += scale * float(np.sum((z - anchor) ** 2))
            return val

        opts = {"xtol": 1e-8, "ftol": 1e-10}
        if maxiter is not None:
            opts["maxiter"] = maxiter
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(obj, z0, method="Powell", options=opts)
            return param.from_unconstrained(res.x)

    # Stage 1: vanillas only, decoupled
    if "1" in config.stages:
        candidate = powell_fit(spec, include_barriers=False)
        cand_obj = full_objective(candidate, 0.0)
        if cand_obj <= current_obj * (1 + 1e-12):
            spec, current_obj = candidate, cand_obj
        else:
            flags.append("stage1-rejected: objective regression")
        stage_objectives["stage1"] = current_obj

    # Stage 2: add barrier quotes, still decoupled; anchored to the stage-1
    # fit so leverage effects in the quotes cannot be absorbed into the clock
    if "2" in config.stages and has_barriers:
        candidate = powell_fit(spec, include_barriers=True,
                               anchor=param.to_unconstrained(spec),
                               anchor_scale=config.stage2_anchor)
        cand_obj = full_objective(candidate, 0.0)
        if cand_obj <= current_obj * (1 + 1e-12):
            spec, current_obj = candidate, cand_obj
        else:
            flags.append("stage2-rejected: objective regression")
        stage_objectives["stage2"] = current_obj

    # Stage 3: cached-coefficient leverage fit
    leverage_quotes = [q for q in dataset.barriers
                       if q.weight > 0 and q.leverage_sensitive]
    if "3" in config.stages and leverage_quotes:
        if isinstance(spec, (CirClock, SquaredOuClock)):
            for q in leverage_quotes:
                key = _barrier_key(q.contract)
                base = _barrier_price_rho0(q.contract, dataset.market, spec)
                coeffs = compute_expansion(
                    q.contract, dataset.market, spec, base,
                    n_max=config.coeff_orders, mc_config=config.mc_config,
                    pde_config=config.pde_config)
                coeff_cache[key] = coeffs.values
            rho, report = fit_rho_cached(coeff_cache, leverage_quotes)
            rho_routes = report["routes"]
            flags.extend(report["flags"])
            cand_obj = full_objective(spec, rho, coeff_cache)
            if cand_obj <= current_obj * (1 + 1e-12):
                current_obj = cand_obj
            else:
                flags.append("stage3-rejected: objective regression")
                rho = 0.0
            stage_objectives["stage3"] = current_obj
        else:
            flags.append("stage3-skipped: leverage fit needs a one-factor "
                         "CIR or squared-OU clock")

    # Stage 4: bounded joint polish with frozen leverage corrections
    if "4" in config.stages and has_barriers and rho != 0.0:
        anchor = param.to_unconstrained(spec)
        base_corrections = {
            key: coeff_cache[key] - np.concatenate(
                [[coeff_cache[key][0]], np.zeros(len(coeff_cache[key]) - 1)])
            for key in coeff_cache}

        def obj4(zr):
            z, r = zr[:-1], float(np.clip(zr[-1], -0.99, 0.99))
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    s = param.from_unconstrained(z)
            except TcbmError:
                return 1e12
            cache = {}
            for q in leverage_quotes:
                key = _barrier_key(q.contract)
                try:
                    base = _barrier_price_rho0(q.contract, dataset.market, s)
                except TcbmError:
                    return 1e12
                corrected = base_corrections[key].copy()
                corrected[0] += base
                cache[key] = corrected
            val = objective_eval(s, dataset, rho=r, vol_space=config.vol_space,
                                 coeff_cache=cache,
                                 barrier_weight_scale=config.barrier_weight_scale,
                                 flags=[])
            return val + config.anchor_penalty * float(np.sum((z - anchor) ** 2))

        z0 = np.concatenate([anchor, [rho]])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(obj4, z0, method="Powell",
                           options={"maxiter": config.stage4_maxiter,
                                    "xtol": 1e-8, "ftol": 1e-10})
            cand_spec = param.from_unconstrained(res.x[:-1])
        cand_rho = float(np.clip(res.x[-1], -0.99, 0.99))
        cache4 = {}
        for q in leverage_quotes:
            key = _barrier_key(q.contract)
            base = _barrier_price_rho0(q.contract, dataset.market, cand_spec)
            corrected = base_corrections[key].copy()
            corrected[0] += base
            cache4[key] = corrected
        cand_obj = full_objective(cand_spec, cand_rho, cache4)
        if cand_obj <= current_obj * (1 + 1e-12):
            spec, rho, current_obj = cand_spec, cand_rho, cand_obj
            coeff_cache = cache4
        else:
            flags.append("stage4-rejected: objective regression")
        stage_objectives["stage4"] = current_obj

    # per-instrument residual report and final diagnostics
    residuals = {}
    for q in dataset.vanillas:
        try:
            model_price = cos_vanilla_price(spec, dataset.market, q)
            if config.vol_space and q.implied_vol is not None:
                model = implied_vol(model_price, dataset.market, q)
                residuals[f"vanilla:{q.maturity:g}:{q.strike:g}"] = model - q.implied_vol
            else:
                residuals[f"vanilla:{q.maturity:g}:{q.strike:g}"] = \
                    model_price - (q.price or 0.0)
        except TcbmError:
            residuals[f"vanilla:{q.maturity:g}:{q.strike:g}"] = float("nan")
    for bq in dataset.barriers:
        key = _barrier_key(bq.contract)
        try:
            if rho != 0.0 and key in coeff_cache:
                model, _ = evaluate_with_fallback(coeff_cache[key], rho)
            else:
                model = _barrier_price_rho0(bq.contract, dataset.market, spec)
            residuals[key] = model - bq.value
        except TcbmError:
            residuals[key] = float("nan")

    if isinstance(spec, CirClock) and 2 * spec.kappa * spec.theta <= spec.xi ** 2:
        flags.append("feller-violated")
    return CalibrationResult(spec=spec, rho=rho,
                             stage_objectives=stage_objectives,
                             residuals=residuals, flags=flags,
                             rho_routes=rho_routes)
