"""Characteristic function, COS pricing, implied vol, variance swaps."""

import math

import numpy as np
import pytest

from tcbm.barrier import BarrierContract, ContractKind, price_doc, price_uop
from tcbm.clocks import ClockTransform, expected_clock
from tcbm.errors import DomainError
from tcbm.vanilla import (VanillaQuote, atm_total_variance, black_price,
                          char_fn, clock_cumulants, cos_vanilla_price,
                          implied_vol, variance_swap_strike)


class TestCharFn:
    def test_at_zero(self, cir_regime1, market):
        val = char_fn(cir_regime1, market, 1.0, 0.0)
        assert val == pytest.approx(1.0 + 0.0j, abs=1e-12)

    @pytest.mark.parametrize("family", ["cir", "sqou", "markov"])
    def test_modulus_bound(self, family, cir_regime1, sqou_regime1,
                           markov_2state, market):
        spec = {"cir": cir_regime1, "sqou": sqou_regime1,
                "markov": markov_2state}[family]
        u = np.linspace(0.0, 200.0, 301)
        vals = char_fn(spec, market, 0.8, u)
        assert np.all(np.abs(vals) <= 1.0 + 1e-10)

    def test_martingale_normalization(self, cir_regime1, market):
        # E[e^{X_T}] = F0: evaluate the exponent representation at u = -i
        T = 1.0
        val = char_fn(cir_regime1, market, T, np.array([-1j]))[0]
        assert val.real == pytest.approx(market.forward(T), rel=1e-8)
        assert abs(val.imag) < 1e-8

    def test_continuity_in_u(self, cir_regime2, market):
        # branch tracking: log char fn has no 2*pi jumps along a sweep
        u = np.linspace(0.01, 300.0, 2000)
        vals = char_fn(cir_regime2, market, 2.0, u)
        phase = np.angle(vals)
        jumps = np.abs(np.diff(np.unwrap(phase)))
        assert np.max(jumps) < 1.0


class TestCosPricing:
    @pytest.mark.parametrize("K", [70.0, 90.0, 100.0, 115.0, 140.0])
    @pytest.mark.parametrize("kind", ["call", "put"])
    def test_black_oracle_deterministic_clock(self, market, K, kind):
        # vanishing vol-of-vol: price must collapse to Black with the mean clock
        from tcbm.clocks import CirClock
        spec = CirClock(kappa=0.6, theta=0.20, xi=1e-4, v0=0.18)
        T = 0.75
        g = expected_clock(spec, T)
        quote = VanillaQuote(maturity=T, strike=K, kind=kind)
        got = cos_vanilla_price(spec, market, quote)
        want = black_price(market.forward(T), K, T, math.sqrt(g / T), kind,
                           market.discount(T))
        assert got == pytest.approx(want, rel=1e-6, abs=1e-8)

    def test_atm_call_bounds(self, cir_regime1, market):
        T = 1.0
        quote = VanillaQuote(maturity=T, strike=100.0, kind="call")
        price = cos_vanilla_price(cir_regime1, market, quote)
        assert 0.0 < price < market.forward(T) * market.discount(T)

    def test_put_call_parity(self, sqou_regime1, market):
        T = 0.5
        K = 105.0
        call = cos_vanilla_price(sqou_regime1, market,
                                 VanillaQuote(T, K, "call"))
        put = cos_vanilla_price(sqou_regime1, market, VanillaQuote(T, K, "put"))
        want = market.discount(T) * (market.forward(T) - K)
        assert call - put == pytest.approx(want, abs=1e-8)

    def test_stability_under_doubling(self, cir_regime2, market):
        quote = VanillaQuote(1.0, 100.0, "call")
        a = cos_vanilla_price(cir_regime2, market, quote, n_terms=256)
        b = cos_vanilla_price(cir_regime2, market, quote, n_terms=1024)
        assert a == pytest.approx(b, abs=1e-7)

    @pytest.mark.parametrize("T", [0.25, 1.0])
    def test_uop_barrier_removal(self, cir_regime1, market, T):
        # far upper barrier: knock-out put converges to the vanilla put
        H = 10.0 * market.spot
        contract = BarrierContract(ContractKind.UP_OUT_PUT, strike=100.0,
                                   maturity=T, upper_barrier=H)
        uop = price_uop(contract, market, ClockTransform(cir_regime1, T))
        put = cos_vanilla_price(cir_regime1, market,
                                VanillaQuote(T, 100.0, "put"))
        assert uop == pytest.approx(put, rel=1e-3)

    @pytest.mark.parametrize("T", [0.25, 1.0])
    def test_doc_barrier_removal(self, cir_regime1, market, T):
        L = market.spot / 10.0
        contract = BarrierContract(ContractKind.DOWN_OUT_CALL, strike=100.0,
                                   maturity=T, lower_barrier=L)
        doc = price_doc(contract, market, ClockTransform(cir_regime1, T))
        call = cos_vanilla_price(cir_regime1, market,
                                 VanillaQuote(T, 100.0, "call"))
        assert doc == pytest.approx(call, rel=1e-3)

    def test_barrier_dominated_by_vanilla(self, cir_regime1, market):
        T = 1.0
        phi = ClockTransform(cir_regime1, T)
        uop = price_uop(BarrierContract(ContractKind.UP_OUT_PUT, 100.0, T,
                                        upper_barrier=130.0), market, phi)
        doc = price_doc(BarrierContract(ContractKind.DOWN_OUT_CALL, 100.0, T,
                                        lower_barrier=70.0), market, phi)
        put = cos_vanilla_price(cir_regime1, market, VanillaQuote(T, 100.0, "put"))
        call = cos_vanilla_price(cir_regime1, market, VanillaQuote(T, 100.0, "call"))
        assert uop <= put + 1e-8
        assert doc <= call + 1e-8


class TestImpliedVol:
    def test_round_trip(self, market):
        T, K = 1.0, 110.0
        price = black_price(market.forward(T), K, T, 0.2, "call",
                            market.discount(T))
        vol = implied_vol(price, market, VanillaQuote(T, K, "call"))
        assert vol == pytest.approx(0.2, abs=1e-10)

    def test_intrinsic_price_rejected(self, market):
        T, K = 1.0, 80.0
        intrinsic = market.discount(T) * (market.forward(T) - K)
        with pytest.raises(DomainError):
            implied_vol(intrinsic, market, VanillaQuote(T, K, "call"))

    def test_monotone_in_price(self, market):
        T, K = 0.5, 100.0
        prices = np.linspace(2.0, 20.0, 10)
        vols = [implied_vol(p, market, VanillaQuote(T, K, "call"))
                for p in prices]
        assert np.all(np.diff(vols) > 0)


class TestVarianceSwap:
    def test_cir_closed_form(self, cir_regime1):
        T = 1.0
        k, th, v0 = cir_regime1.kappa, cir_regime1.theta, cir_regime1.v0
        want = th + (v0 - th) * (1 - math.exp(-k * T)) / (k * T)
        assert variance_swap_strike(cir_regime1, T) == pytest.approx(want, rel=1e-12)

    def test_stationary_start_flat(self):
        from tcbm.clocks import CirClock
        spec = CirClock(kappa=0.7, theta=0.2, xi=0.3, v0=0.2)
        for T in (0.25, 1.0, 4.0):
            assert variance_swap_strike(spec, T) == pytest.approx(0.2, rel=1e-12)

    def test_short_horizon_limit(self, cir_regime1, sqou_regime1):
        assert variance_swap_strike(cir_regime1, 1e-6) == pytest.approx(
            cir_regime1.v0, abs=1e-4)
        assert variance_swap_strike(sqou_regime1, 1e-6) == pytest.approx(
            sqou_regime1.y0 ** 2, abs=1e-4)

    def test_cumulants_match_expected_clock(self, cir_regime1, sqou_regime1,
                                            markov_2state):
        for spec in (cir_regime1, sqou_regime1, markov_2state):
            m1, var = clock_cumulants(spec, 0.8)
            assert m1 == pytest.approx(expected_clock(spec, 0.8), rel=1e-4)
            assert var >= 0

    def test_atm_total_variance_close_to_mean_clock(self, cir_regime1, market):
        # mixture convexity keeps ATM total variance near (below) E[Gamma]
        T = 1.0
        w = atm_total_variance(cir_regime1, market, T)
        m = expected_clock(cir_regime1, T)
        assert 0.7 * m < w < 1.02 * m
