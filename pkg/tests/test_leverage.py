"""Leverage expansion layer: baseline plug-in, forcing, both coefficient routes."""

import math

import numpy as np
import pytest

from tcbm.barrier import (BarrierContract, ContractKind, MarketEnv, price_doc,
                          price_uop)
from tcbm.clocks import CirClock, ClockTransform
from tcbm.errors import DomainError, NotComputableError, UnsupportedFamilyError
from tcbm.leverage import (PdeConfig, baseline_u0, build_forcing_table,
                           compute_expansion, duhamel_coefficient_1,
                           forced_pde_coefficient, forcing_mixed_derivative,
                           leverage_coupling, residual_error_indicator)
from tcbm.mc import McConfig


@pytest.fixture(scope="module")
def doc_contract():
    return BarrierContract(ContractKind.DOWN_OUT_CALL, strike=100.0,
                           maturity=1.0, lower_barrier=70.0)


@pytest.fixture(scope="module")
def uop_contract():
    return BarrierContract(ContractKind.UP_OUT_PUT, strike=100.0,
                           maturity=1.0, upper_barrier=130.0)


class TestBaseline:
    def test_t0_matches_unconditional_price(self, doc_contract, market,
                                            cir_regime1):
        x0 = math.log(market.forward(1.0))
        got = baseline_u0(0.0, x0, cir_regime1.v0, doc_contract, market,
                          cir_regime1)
        want = price_doc(doc_contract, market, ClockTransform(cir_regime1, 1.0))
        assert got == pytest.approx(want, abs=1e-9)

    def test_t0_matches_unconditional_uop(self, uop_contract, market,
                                          cir_regime1):
        x0 = math.log(market.forward(1.0))
        got = baseline_u0(0.0, x0, cir_regime1.v0, uop_contract, market,
                          cir_regime1)
        want = price_uop(uop_contract, market, ClockTransform(cir_regime1, 1.0))
        assert got == pytest.approx(want, abs=1e-9)

    def test_terminal_condition(self, doc_contract, market, cir_regime1):
        # approaching maturity inside the corridor, value -> payoff
        x = math.log(110.0)
        got = baseline_u0(1.0 - 1e-6, x, 0.18, doc_contract, market,
                          cir_regime1)
        assert got == pytest.approx(110.0 - 100.0, abs=1e-3)

    def test_dirichlet_at_barrier(self, doc_contract, market, cir_regime1):
        x = math.log(doc_contract.lower_barrier)
        assert baseline_u0(0.3, x, 0.2, doc_contract, market, cir_regime1) == 0.0

    def test_value_increases_away_from_knockout(self, doc_contract, market,
                                                cir_regime1):
        # d/dx of the baseline is positive near the lower barrier
        x = math.log(80.0)
        h = 1e-4
        up = baseline_u0(0.2, x + h, 0.2, doc_contract, market, cir_regime1)
        dn = baseline_u0(0.2, x - h, 0.2, doc_contract, market, cir_regime1)
        assert up > dn


class TestForcing:
    def test_zero_at_maturity(self, doc_contract, market, cir_regime1):
        val = forcing_mixed_derivative(1.0, math.log(100.0), 0.2, doc_contract,
                                       market, cir_regime1)
        assert val == 0.0

    def test_zero_coupling_state(self, doc_contract, market, cir_regime1):
        # CIR coupling a(y) sqrt(v(y)) vanishes at y = 0
        val = forcing_mixed_derivative(0.5, math.log(100.0), 0.0, doc_contract,
                                       market, cir_regime1)
        assert val == 0.0

    def test_barrier_guard(self, doc_contract, market, cir_regime1):
        with pytest.raises(DomainError):
            forcing_mixed_derivative(0.5, math.log(70.0) + 1e-8, 0.2,
                                     doc_contract, market, cir_regime1)

    @pytest.mark.parametrize("contract_name", ["doc", "uop"])
    def test_matches_finite_differences(self, contract_name, doc_contract,
                                        uop_contract, market, cir_regime1,
                                        request):
        # criterion: semi-analytic mixed derivative vs 2-d central differences
        contract = doc_contract if contract_name == "doc" else uop_contract
        rng = np.random.default_rng(7)
        T = contract.maturity
        x0 = math.log(market.forward(T))
        checked = 0
        while checked < 10:
            t = rng.uniform(0.05, 0.85) * T
            if contract.kind is ContractKind.DOWN_OUT_CALL:
                x = rng.uniform(math.log(78.0), x0 + 0.4)
            else:
                x = rng.uniform(x0 - 0.4, math.log(124.0))
            y = rng.uniform(0.06, 0.5)
            got = forcing_mixed_derivative(t, x, y, contract, market,
                                           cir_regime1)
            couple = float(leverage_coupling(cir_regime1, y))
            hx, hy = 1e-4, 1e-5 * max(1.0, abs(y))
            disc = math.exp(-market.rate * (T - t))
            fd = (baseline_u0(t, x + hx, y + hy, contract, market, cir_regime1)
                  - baseline_u0(t, x + hx, y - hy, contract, market, cir_regime1)
                  - baseline_u0(t, x - hx, y + hy, contract, market, cir_regime1)
                  + baseline_u0(t, x - hx, y - hy, contract, market, cir_regime1)
                  ) / (4 * hx * hy) / disc
            want = couple * fd
            if abs(want) < 1e-4:
                continue  # relative comparison meaningless near a zero crossing
            assert got == pytest.approx(want, rel=1e-4)
            checked += 1

    def test_table_matches_point_values(self, doc_contract, market,
                                        cir_regime1):
        times = np.linspace(0.0, 1.0, 81)
        table = build_forcing_table(doc_contract, market, cir_regime1, times)
        x0 = math.log(market.forward(1.0))
        for (it, x, y) in [(16, x0, 0.18), (40, x0 - 0.2, 0.3),
                           (64, x0 + 0.3, 0.12)]:
            got = float(table.eval(it, np.array([x]), np.array([y]))[0])
            want = forcing_mixed_derivative(float(times[it]), x, y,
                                            doc_contract, market, cir_regime1)
            assert got == pytest.approx(want, rel=2e-2, abs=1e-4)

    def test_table_outside_grid_is_zero(self, doc_contract, market,
                                        cir_regime1):
        times = np.linspace(0.0, 1.0, 11)
        table = build_forcing_table(doc_contract, market, cir_regime1, times)
        vals = table.eval(5, np.array([table.x_grid[-1] + 1.0,
                                       table.x_grid[0] - 1.0]),
                          np.array([0.2, 0.2]))
        assert np.all(vals == 0.0)


class TestDuhamelRoute:
    def test_c1_positive_and_reproducible(self, doc_contract, market,
                                          cir_regime1):
        cfg = McConfig(n_paths=20_000, n_steps_per_year=260, seed=5)
        c1a, se_a = duhamel_coefficient_1(doc_contract, market, cir_regime1, cfg)
        c1b, se_b = duhamel_coefficient_1(doc_contract, market, cir_regime1, cfg)
        assert c1a == c1b and se_a == se_b
        assert c1a > 0  # negative correlation must lower this contract's value
        assert se_a < 0.05 * abs(c1a)

    def test_unsupported_family(self, doc_contract, market, markov_2state):
        with pytest.raises(UnsupportedFamilyError):
            duhamel_coefficient_1(doc_contract, market, markov_2state,
                                  McConfig(n_paths=100))


class TestPdeRoute:
    def test_route_agreement_first_order(self, doc_contract, market,
                                         cir_regime1):
        cfg = McConfig(n_paths=60_000, n_steps_per_year=260, seed=9)
        c1_mc, se = duhamel_coefficient_1(doc_contract, market, cir_regime1, cfg)
        _, c1_pde = forced_pde_coefficient(1, None, doc_contract, market,
                                           cir_regime1, PdeConfig())
        # combined tolerance: twice the larger of the MC band and a
        # discretization allowance estimated from a coarser solve
        _, c1_coarse = forced_pde_coefficient(
            1, None, doc_contract, market, cir_regime1,
            PdeConfig(nx=120, ny=48, nt=120))
        pde_err = abs(c1_pde - c1_coarse)
        assert abs(c1_mc - c1_pde) <= 2.0 * max(se, pde_err, 1e-3)

    def test_zero_forcing_zero_solution(self, doc_contract, market,
                                        cir_regime1):
        from tcbm.leverage import forced_pde_solve, default_state_grids
        x_grid, y_grid = default_state_grids(doc_contract, market, cir_regime1,
                                             60, 24)
        times = np.linspace(0.0, 1.0, 41)
        zero = np.zeros((len(x_grid), len(y_grid)))
        stack = forced_pde_solve(lambda i: zero, cir_regime1, doc_contract,
                                 market, x_grid, y_grid, times, PdeConfig())
        assert np.max(np.abs(stack.values)) == 0.0

    def test_second_order_stability(self, doc_contract, market, cir_regime1):
        cfg = PdeConfig(nx=160, ny=64, nt=160)
        stack, _ = forced_pde_coefficient(1, None, doc_contract, market,
                                          cir_regime1, cfg)
        _, c2 = forced_pde_coefficient(2, stack, doc_contract, market,
                                       cir_regime1, cfg)
        fine = PdeConfig(nx=240, ny=96, nt=240)
        stack_f, _ = forced_pde_coefficient(1, None, doc_contract, market,
                                            cir_regime1, fine)
        _, c2_f = forced_pde_coefficient(2, stack_f, doc_contract, market,
                                         cir_regime1, fine)
        assert c2 == pytest.approx(c2_f, rel=0.1)


class TestExpansionBundle:
    def test_bundle_contents(self, doc_contract, market, cir_regime1):
        p0 = price_doc(doc_contract, market, ClockTransform(cir_regime1, 1.0))
        coeffs = compute_expansion(
            doc_contract, market, cir_regime1, p0, n_max=2,
            mc_config=McConfig(n_paths=20_000, n_steps_per_year=260, seed=3),
            pde_config=PdeConfig(nx=120, ny=48, nt=120), keep_fields=True)
        assert coeffs.values[0] == pytest.approx(p0, abs=1e-12)
        assert coeffs.routes == ("analytic-baseline", "duhamel-mc", "forced-pde")
        assert coeffs.standard_errors[1] > 0
        assert coeffs.c1_pde == pytest.approx(coeffs.values[1],
                                              abs=3 * coeffs.standard_errors[1] + 5e-3)

    def test_residual_indicator(self, doc_contract, market, cir_regime1):
        p0 = price_doc(doc_contract, market, ClockTransform(cir_regime1, 1.0))
        coeffs = compute_expansion(
            doc_contract, market, cir_regime1, p0, n_max=1,
            mc_config=McConfig(n_paths=5_000, n_steps_per_year=130, seed=3),
            pde_config=PdeConfig(nx=100, ny=40, nt=100), keep_fields=True)
        assert residual_error_indicator(coeffs, 0.0) == 0.0
        ind3 = residual_error_indicator(coeffs, 0.3)
        ind6 = residual_error_indicator(coeffs, 0.6)
        # growth is exactly |rho|^{N+1} by construction
        assert ind6 / ind3 == pytest.approx(2 ** 2, rel=1e-12)
        assert ind3 > 0

    def test_residual_needs_fields(self, doc_contract, market, cir_regime1):
        p0 = price_doc(doc_contract, market, ClockTransform(cir_regime1, 1.0))
        coeffs = compute_expansion(
            doc_contract, market, cir_regime1, p0, n_max=1,
            mc_config=McConfig(n_paths=2_000, n_steps_per_year=130, seed=3),
            pde_config=PdeConfig(nx=80, ny=32, nt=80), keep_fields=False)
        with pytest.raises(NotComputableError):
            residual_error_indicator(coeffs, 0.5)

    def test_antisymmetric_forcing_averages_to_zero(self):
        # when the forcing integrand is x-antisymmetric at every time slice,
        # the Duhamel average over a symmetric killed law has mean zero
        rng = np.random.default_rng(11)
        n = 40_000
        x = rng.standard_normal(n)          # symmetric state draw
        forcing = lambda z: z ** 3 - 2.0 * z   # odd function
        sample = forcing(x)
        se = sample.std() / math.sqrt(n)
        assert abs(sample.mean()) < 3 * se
