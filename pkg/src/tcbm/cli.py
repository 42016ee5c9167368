"""Command-line entry point.

Subcommands: price, mc-validate, rho-expand, pade, vanilla, calibrate,
repro-table. Inputs are structured JSON config files (schema-checked, unknown
fields rejected); outputs are CSV with a comment header carrying the config
digest and seed so a run is reproducible byte-for-byte from its header.

Exit codes: 0 success, 1 validation/geometry error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys

import numpy as np

from .barrier import (BarrierContract, ContractKind, MarketEnv,
                      dirichlet_grid, price_dko, price_doc, price_uop)
from .calibrate import (BarrierQuote, CalibrationDataset, PipelineConfig,
                        VarSwapQuote, VixProxyQuote, run_stage_pipeline)
from .clocks import (CirClock, ClockTransform, MarkovSwitchingClock,
                     SquaredOuClock, TimeDepCirClock, TwoFactorCirClock,
                     build_transform_cache, clock_digest)
from .errors import (ConvergenceError, DegenerateSystemError, DomainError,
                     GeometryError, IntegrationError, NotComputableError,
                     TcbmError, UnsupportedFamilyError, ValidationError)
from .leverage import PdeConfig, compute_expansion
from .mc import McConfig, price_barrier_mc_rho0, worker_count
from .pade import FallbackPolicy, evaluate_with_fallback, pade_fit, taylor_eval
from .quadrature import QuadratureConfig
from .reference import ALL_TABLE_IDS, repro_table
from .vanilla import VanillaQuote, cos_vanilla_price, implied_vol

VALIDATION_EXIT = 1
NUMERICAL_EXIT = 2


# --------------------------------------------------------------------------- #
# Config parsing (strict: unknown fields rejected)
# --------------------------------------------------------------------------- #

def _require(cfg: dict, where: str, required: tuple, optional: tuple = ()):
    if not isinstance(cfg, dict):
        raise ValidationError(f"{where}: expected an object")
    unknown = set(cfg) - set(required) - set(optional)
    if unknown:
        raise ValidationError(f"{where}: unknown fields {sorted(unknown)}")
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ValidationError(f"{where}: missing fields {missing}")


def parse_clock(cfg: dict):
    _require(cfg, "clock", ("family",),
             ("kappa", "theta", "xi", "v0", "alpha", "sigma", "y0",
              "generator", "levels", "initial_dist", "breakpoints",
              "fast", "slow", "weight"))
    family = cfg["family"]
    try:
        if family == "cir":
            _require(cfg, "clock(cir)", ("family", "kappa", "theta", "xi", "v0"))
            return CirClock(kappa=cfg["kappa"], theta=cfg["theta"],
                            xi=cfg["xi"], v0=cfg["v0"])
        if family == "tdcir":
            _require(cfg, "clock(tdcir)",
                     ("family", "breakpoints", "kappa", "theta", "xi", "v0"))
            return TimeDepCirClock(breakpoints=tuple(cfg["breakpoints"]),
                                   kappa=tuple(cfg["kappa"]),
                                   theta=tuple(cfg["theta"]),
                                   xi=tuple(cfg["xi"]), v0=cfg["v0"])
        if family == "sqou":
            _require(cfg, "clock(sqou)", ("family", "alpha", "sigma", "y0"))
            return SquaredOuClock(alpha=cfg["alpha"], sigma=cfg["sigma"],
                                  y0=cfg["y0"])
        if family == "markov":
            _require(cfg, "clock(markov)",
                     ("family", "generator", "levels", "initial_dist"))
            return MarkovSwitchingClock(
                generator=tuple(tuple(r) for r in cfg["generator"]),
                levels=tuple(cfg["levels"]),
                initial_dist=tuple(cfg["initial_dist"]))
        if family == "cir2":
            _require(cfg, "clock(cir2)", ("family", "fast", "slow", "weight"))
            return TwoFactorCirClock(fast=parse_clock({**cfg["fast"], "family": "cir"}),
                                     slow=parse_clock({**cfg["slow"], "family": "cir"}),
                                     weight=cfg["weight"])
    except (TypeError, KeyError) as exc:
        raise ValidationError(f"clock config malformed: {exc}") from exc
    raise ValidationError(f"unknown clock family '{family}'")


_KINDS = {"uop": ContractKind.UP_OUT_PUT, "doc": ContractKind.DOWN_OUT_CALL,
          "dko_call": ContractKind.DKO_CALL, "dko_put": ContractKind.DKO_PUT}


def parse_contract(cfg: dict) -> BarrierContract:
    _require(cfg, "contract", ("kind", "strike", "maturity"),
             ("upper_barrier", "lower_barrier"))
    if cfg["kind"] not in _KINDS:
        raise ValidationError(f"unknown contract kind '{cfg['kind']}'")
    return BarrierContract(kind=_KINDS[cfg["kind"]], strike=cfg["strike"],
                           maturity=cfg["maturity"],
                           upper_barrier=cfg.get("upper_barrier"),
                           lower_barrier=cfg.get("lower_barrier"))


def parse_market(cfg: dict) -> MarketEnv:
    _require(cfg, "market", ("spot", "rate"), ("dividend",))
    return MarketEnv(spot=cfg["spot"], rate=cfg["rate"],
                     dividend=cfg.get("dividend", 0.0))


def parse_quadrature(cfg: dict) -> QuadratureConfig:
    _require(cfg, "quadrature", (), ("rel_tol", "abs_tol", "initial_cutoff",
                                     "cutoff_growth", "max_doublings",
                                     "max_refinements"))
    return QuadratureConfig(**cfg)


def parse_mc(cfg: dict) -> McConfig:
    _require(cfg, "mc", (), ("n_paths", "n_steps_per_year", "seed",
                             "antithetic", "block_size", "bridge_correction"))
    return McConfig(**cfg)


def parse_pde(cfg: dict) -> PdeConfig:
    _require(cfg, "pde", (), ("nx", "ny", "nt", "theta", "rannacher_steps"))
    return PdeConfig(**cfg)


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from exc


def config_digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- #
# Output plumbing
# --------------------------------------------------------------------------- #

def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_csv(path, header_comment: str, columns, rows, append: bool = False):
    lines = [f"# {header_comment}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "a" if append else "w") as fh:
            fh.write(text)


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #

def cmd_price(args) -> int:
    cfg = load_config(args.config)
    _require(cfg, "price config", ("clock", "contract", "market"),
             ("quadrature", "dko_terms"))
    spec = parse_clock(cfg["clock"])
    contract = parse_contract(cfg["contract"])
    market = parse_market(cfg["market"])
    quad = parse_quadrature(cfg.get("quadrature", {}))
    digest = config_digest(cfg)
    T = contract.maturity
    if contract.kind is ContractKind.DOWN_OUT_CALL:
        value = price_doc(contract, market, ClockTransform(spec, T), quad)
        n_terms = ""
    elif contract.kind is ContractKind.UP_OUT_PUT:
        value = price_uop(contract, market, ClockTransform(spec, T), quad)
        n_terms = ""
    else:
        grid = dirichlet_grid(contract.lower_barrier, contract.upper_barrier,
                              cfg.get("dko_terms", 800))
        cache = build_transform_cache(spec, 0.0, T, grid)
        res = price_dko(contract, market, cache)
        value, n_terms = res.price, res.n_terms
    write_csv(args.out,
              f"tcbm price config_digest={digest} clock_digest={clock_digest(spec)}",
              ("kind", "strike", "maturity", "price", "series_terms"),
              [(cfg["contract"]["kind"], contract.strike, T, value, n_terms)])
    return 0


def cmd_mc_validate(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    _require(cfg, "mc-validate config", (), ("tables", "seed", "scale"))
    tables = cfg.get("tables", ["6.2", "6.3", "6.4", "6.5", "6.6", "6.7"])
    seed = int(cfg.get("seed", 20240601))
    scale = args.scale or cfg.get("scale", "desk")
    digest = config_digest({"tables": tables, "seed": seed, "scale": scale})
    rows = []
    for tid in tables:
        rep = repro_table(tid, scale=scale, seed=seed)
        for (T, analytic, mc, se, rel, _rp, _rm) in rep.rows:
            rows.append((tid, T, analytic, mc, se, rel))
    write_csv(args.out, f"tcbm mc-validate config_digest={digest} seed={seed}",
              ("table", "T", "analytic", "mc", "se", "rel_err"), rows)
    return 0


def cmd_rho_expand(args) -> int:
    cfg = load_config(args.config)
    _require(cfg, "rho-expand config", ("clock", "contract", "market"),
             ("orders", "mc", "pde"))
    spec = parse_clock(cfg["clock"])
    contract = parse_contract(cfg["contract"])
    market = parse_market(cfg["market"])
    mc_cfg = parse_mc(cfg.get("mc", {"n_paths": 50_000, "n_steps_per_year": 520}))
    pde_cfg = parse_pde(cfg.get("pde", {}))
    orders = int(cfg.get("orders", 2))
    digest = config_digest(cfg)
    T = contract.maturity
    phi = ClockTransform(spec, T)
    if contract.kind is ContractKind.DOWN_OUT_CALL:
        base = price_doc(contract, market, phi)
    elif contract.kind is ContractKind.UP_OUT_PUT:
        base = price_uop(contract, market, phi)
    else:
        cache = build_transform_cache(
            spec, 0.0, T, dirichlet_grid(contract.lower_barrier,
                                         contract.upper_barrier, 800))
        base = price_dko(contract, market, cache).price
    coeffs = compute_expansion(contract, market, spec, base, n_max=orders,
                               mc_config=mc_cfg, pde_config=pde_cfg)
    rows = [(n, v, se, route)
            for n, (v, se, route) in enumerate(zip(coeffs.values,
                                                   coeffs.standard_errors,
                                                   coeffs.routes))]
    write_csv(args.out,
              f"tcbm rho-expand config_digest={digest} seed={mc_cfg.seed} "
              f"clock_digest={coeffs.clock_key} contract_digest={coeffs.contract_key}",
              ("order", "coefficient", "standard_error", "route"), rows)
    return 0


def cmd_pade(args) -> int:
    cfg = load_config(args.config)
    _require(cfg, "pade config", ("coefficients",),
             ("orders", "rho_grid", "pole_threshold"))
    coeffs = np.asarray(cfg["coefficients"], dtype=float)
    orders = [tuple(o) for o in cfg.get("orders", [[2, 2], [3, 2]])]
    rho_grid = cfg.get("rho_grid",
                       [-0.9, -0.7, -0.5, -0.3, 0.3, 0.5, 0.7, 0.9])
    policy = FallbackPolicy(pole_threshold=cfg.get("pole_threshold", 0.2),
                            orders=tuple(orders))
    digest = config_digest(cfg)
    approximants = {}
    info_rows = []
    for (L, M) in orders:
        try:
            ap = pade_fit(coeffs, L, M)
        except (DegenerateSystemError, DomainError) as exc:
            info_rows.append((f"[{L}/{M}]", "", "", f"degenerate: {exc}"))
            continue
        approximants[(L, M)] = ap
        info_rows.append((
            f"[{L}/{M}]",
            ";".join(f"{p.real:.6g}{p.imag:+.6g}j" for p in ap.poles),
            ap.pole_proximity,
            " ".join(_fmt(a) for a in ap.numerator) + " / "
            + " ".join(_fmt(b) for b in ap.denominator)))
    sweep_rows = []
    for rho in rho_grid:
        row = [rho, taylor_eval(coeffs, float(rho))]
        for (L, M) in orders:
            ap = approximants.get((L, M))
            row.append(ap(float(rho)) if ap is not None else "")
        val, route = evaluate_with_fallback(coeffs, float(rho), policy)
        row.extend([val, route])
        sweep_rows.append(tuple(row))
    header = f"tcbm pade config_digest={digest}"
    write_csv(args.out, header + " (approximants)",
              ("order", "poles", "pole_proximity", "coefficients"), info_rows)
    sweep_cols = ["rho", "taylor"] + [f"pade{L}{M}" for (L, M) in orders] \
        + ["selected", "route"]
    sweep_target = args.out_sweep or args.out
    write_csv(sweep_target, header + " (sweep)", tuple(sweep_cols), sweep_rows,
              append=(args.out_sweep is None and args.out not in (None, "-")))
    return 0


def cmd_vanilla(args) -> int:
    cfg = load_config(args.config)
    _require(cfg, "vanilla config", ("clock", "market", "maturities", "strikes"),
             ("kind",))
    spec = parse_clock(cfg["clock"])
    market = parse_market(cfg["market"])
    kind = cfg.get("kind", "call")
    digest = config_digest(cfg)
    rows = []
    for T in cfg["maturities"]:
        for K in cfg["strikes"]:
            quote = VanillaQuote(maturity=T, strike=K, kind=kind)
            price = cos_vanilla_price(spec, market, quote)
            try:
                vol = implied_vol(price, market, quote)
            except DomainError:
                vol = float("nan")
            rows.append((T, K, kind, price, vol))
    write_csv(args.out,
              f"tcbm vanilla config_digest={digest} clock_digest={clock_digest(spec)}",
              ("maturity", "strike", "kind", "price", "implied_vol"), rows)
    return 0


def _parse_dataset(cfg: dict) -> CalibrationDataset:
    _require(cfg, "dataset", ("market", "vanillas"),
             ("barriers", "varswaps", "vix_proxies"))
    market = parse_market(cfg["market"])
    vanillas = []
    for q in cfg["vanillas"]:
        _require(q, "vanilla quote", ("maturity", "strike"),
                 ("kind", "price", "implied_vol", "weight"))
        vanillas.append(VanillaQuote(
            maturity=q["maturity"], strike=q["strike"],
            kind=q.get("kind", "call"), price=q.get("price"),
            implied_vol=q.get("implied_vol"), weight=q.get("weight", 1.0)))
    barriers = []
    for q in cfg.get("barriers", []):
        _require(q, "barrier quote", ("kind", "strike", "maturity", "value"),
                 ("upper_barrier", "lower_barrier", "weight",
                  "leverage_sensitive", "discrete_monitoring_dates"))
        contract_cfg = {k: q[k] for k in
                        ("kind", "strike", "maturity", "upper_barrier",
                         "lower_barrier") if k in q}
        contract = parse_contract(contract_cfg)
        value = q["value"]
        if "discrete_monitoring_dates" in q:
            contract, value = _continuity_adjust(contract, value,
                                                 q["discrete_monitoring_dates"])
        barriers.append(BarrierQuote(contract=contract, value=value,
                                     weight=q.get("weight", 1.0),
                                     leverage_sensitive=q.get(
                                         "leverage_sensitive", True)))
    varswaps = []
    for q in cfg.get("varswaps", []):
        _require(q, "varswap quote", ("maturity", "strike"), ())
        varswaps.append(VarSwapQuote(maturity=q["maturity"], strike=q["strike"]))
    proxies = []
    for q in cfg.get("vix_proxies", []):
        _require(q, "vix proxy", ("maturity", "value"), ("window",))
        proxies.append(VixProxyQuote(maturity=q["maturity"], value=q["value"],
                                     window=q.get("window", 30.0 / 365.0)))
    return CalibrationDataset(market=market, vanillas=vanillas,
                              barriers=barriers, varswaps=varswaps,
                              vix_proxies=proxies)


_BGK_BETA = 0.5826  # continuity-correction constant for discrete monitoring


def _continuity_adjust(contract: BarrierContract, value: float,
                       n_dates: int) -> tuple:
    """Shift discretely monitored barriers onto the continuous-monitoring
    engine: barrier * exp(+- beta_const * sigma_proxy * sqrt(dt))."""
    if n_dates < 1:
        raise ValidationError("discrete_monitoring_dates must be >= 1")
    dt = contract.maturity / n_dates
    sigma_proxy = 0.2
    shift = math.exp(_BGK_BETA * sigma_proxy * math.sqrt(dt))
    upper = contract.upper_barrier * shift if contract.upper_barrier else None
    lower = contract.lower_barrier / shift if contract.lower_barrier else None
    return BarrierContract(kind=contract.kind, strike=contract.strike,
                           maturity=contract.maturity, upper_barrier=upper,
                           lower_barrier=lower), value


def cmd_calibrate(args) -> int:
    cfg = load_config(args.dataset)
    dataset = _parse_dataset(cfg)
    digest = config_digest(cfg)
    if args.family == "markov":
        raise ValidationError(
            "calibration families: cir, cir2, sqou (the finite-state chain "
            "has no staged-pipeline support)")
    result = run_stage_pipeline(dataset, args.family,
                                PipelineConfig(stages=args.stages))
    spec = result.spec
    lines = [f"# tcbm calibrate config_digest={digest} family={args.family} "
             f"stages={args.stages}",
             f"fitted_clock_digest,{clock_digest(spec)}"]
    if isinstance(spec, CirClock):
        lines.append(f"v0,{spec.v0:.10g}")
        lines.append(f"theta,{spec.theta:.10g}")
        lines.append(f"kappa,{spec.kappa:.10g}")
        lines.append(f"xi,{spec.xi:.10g}")
    elif isinstance(spec, SquaredOuClock):
        lines.append(f"alpha,{spec.alpha:.10g}")
        lines.append(f"sigma,{spec.sigma:.10g}")
        lines.append(f"y0,{spec.y0:.10g}")
    elif isinstance(spec, TwoFactorCirClock):
        for tag, f in (("fast", spec.fast), ("slow", spec.slow)):
            lines.append(f"{tag}_kappa,{f.kappa:.10g}")
            lines.append(f"{tag}_theta,{f.theta:.10g}")
            lines.append(f"{tag}_xi,{f.xi:.10g}")
            lines.append(f"{tag}_v0,{f.v0:.10g}")
        lines.append(f"weight,{spec.weight:.10g}")
    lines.append(f"rho,{result.rho:.10g}")
    for stage, obj in result.stage_objectives.items():
        lines.append(f"objective_{stage},{obj:.10g}")
    for key, res in result.residuals.items():
        lines.append(f"residual_{key},{res:.10g}")
    for flag in result.flags:
        lines.append(f"flag,{flag}")
    text = "\n".join(lines) + "\n"
    if args.out is None or args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
    return 0


def cmd_repro_table(args) -> int:
    rep = repro_table(args.table, scale=args.scale, seed=args.seed)
    digest = config_digest({"table": args.table, "scale": args.scale,
                            "seed": args.seed})
    rows = list(rep.rows)
    write_csv(args.out,
              f"tcbm repro-table {args.table} config_digest={digest} "
              f"seed={args.seed} scale={args.scale}",
              rep.columns, rows)
    for (label, ok, detail) in rep.passes:
        sys.stderr.write(f"[{'PASS' if ok else 'FAIL'}] {args.table} {label}: "
                         f"{detail}\n")
    return 0


# --------------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tcbm",
        description="Barrier pricing and calibration under stochastic-clock "
                    "volatility models")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: TCBM_NUM_THREADS env var "
                        f"or logical cores; currently {worker_count()})")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("price", help="price one barrier contract")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_price)

    sp = sub.add_parser("mc-validate",
                        help="analytic vs Monte Carlo across the benchmark grid")
    sp.add_argument("--config", default=None)
    sp.add_argument("--scale", choices=("desk", "full"), default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_mc_validate)

    sp = sub.add_parser("rho-expand", help="correlation expansion coefficients")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_rho_expand)

    sp = sub.add_parser("pade", help="rational resummation diagnostics and sweep")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--out-sweep", dest="out_sweep", default=None)
    sp.set_defaults(fn=cmd_pade)

    sp = sub.add_parser("vanilla", help="price vanilla ladders")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_vanilla)

    sp = sub.add_parser("calibrate", help="staged calibration from a dataset file")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--family", required=True,
                    choices=("cir", "cir2", "sqou", "markov"))
    sp.add_argument("--stages", default="1234")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_calibrate)

    sp = sub.add_parser("repro-table", help="recompute one benchmark table")
    sp.add_argument("table")
    sp.add_argument("--scale", choices=("desk", "full"), default="desk")
    sp.add_argument("--seed", type=int, default=20240601)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_repro_table)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        import os
        os.environ["TCBM_NUM_THREADS"] = str(args.threads)
    try:
        return args.fn(args)
    except (ValidationError, DomainError, GeometryError,
            UnsupportedFamilyError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return VALIDATION_EXIT
    except (ConvergenceError, IntegrationError, DegenerateSystemError,
            NotComputableError) as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return NUMERICAL_EXIT
    except TcbmError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return NUMERICAL_EXIT


if __name__ == "__main__":
    sys.exit(main())
