"""Single- and double-barrier pricers vs independent oracles."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from tcbm.barrier import (
    BarrierContract, ContractKind, MarketEnv, dirichlet_grid, dko_coefficients,
    joint_cdf, killed_density, price_dko, price_doc, price_uop,
    survival_probability, upper_tail,
)
from tcbm.blackworld import dko_black, doc_black, uop_black
from tcbm.clocks import ClockTransform, build_transform_cache
from tcbm.errors import DomainError, GeometryError
from tcbm.quadrature import QuadratureConfig

from .oracles import image_killed_density, integrated_image_cdf

BETA = -0.5


def det_phi(g):
    return lambda lam: np.exp(-lam * np.asarray(g))


class TestKilledDensity:
    @pytest.mark.parametrize("x", [4.0, 4.4, 4.6, 4.85])
    @pytest.mark.parametrize("beta", [-0.5, 0.5])
    def test_matches_image_formula(self, x, beta):
        x0, h, g = math.log(100.0), math.log(130.0), 0.045
        got = killed_density(x, h, x0, beta, det_phi(g))
        want = image_killed_density(x, x0, h, g, beta)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-12)

    def test_vanishes_at_barrier(self):
        x0, h, g = math.log(100.0), math.log(130.0), 0.045
        assert killed_density(h - 1e-9, h, x0, BETA, det_phi(g)) < 1e-7

    def test_integrates_to_survival(self, cir_regime1):
        x0, h, T = math.log(100.0), math.log(130.0), 0.5
        phi = ClockTransform(cir_regime1, T)
        total, _ = quad(lambda x: killed_density(x, h, x0, BETA, phi),
                        x0 - 8.0, h, limit=200, epsabs=1e-11)
        surv = survival_probability(h, x0, BETA, phi)
        assert total == pytest.approx(surv, abs=1e-7)

    def test_domain_error(self):
        with pytest.raises(DomainError):
            killed_density(5.0, 4.9, 4.6, BETA, det_phi(0.04))


class TestJointCdf:
    @pytest.mark.parametrize("beta", [-0.5, 0.5])
    @pytest.mark.parametrize("x", [4.45, 4.6052, 4.79])
    def test_matches_integrated_image_cdf(self, beta, x):
        x0, h, g = math.log(100.0), math.log(130.0), 0.045
        got = joint_cdf(x, h, x0, beta, det_phi(g))
        want = integrated_image_cdf(x, x0, h, g, beta)
        assert got == pytest.approx(want, abs=1e-8)

    def test_far_left_tail_zero(self):
        x0, h, g = math.log(100.0), math.log(130.0), 0.045
        assert joint_cdf(x0 - 6.0, h, x0, BETA, det_phi(g)) < 1e-10

    def test_monotone_in_x(self, cir_regime1):
        x0, h, T = math.log(100.0), math.log(130.0), 0.5
        phi = ClockTransform(cir_regime1, T)
        xs = np.linspace(x0 - 1.5, h - 1e-6, 50)
        vals = [joint_cdf(float(x), h, x0, BETA, phi) for x in xs]
        assert np.all(np.diff(vals) >= -1e-9)

    def test_survival_drift_flip_identity(self):
        # the beta < 0 branch rides on S(b) = 1 - e^{2 b a}(1 - S(-b))
        x0, h, g = math.log(100.0), math.log(125.0), 0.07
        s_neg = survival_probability(h, x0, BETA, det_phi(g))
        brute = integrated_image_cdf(h - 1e-12, x0, h, g, BETA)
        assert s_neg == pytest.approx(brute, abs=1e-8)

    def test_upper_tail_plus_cdf_is_survival(self, cir_regime1):
        x0, h, T = math.log(100.0), math.log(130.0), 1.0
        phi = ClockTransform(cir_regime1, T)
        x = 4.7
        s = survival_probability(h, x0, BETA, phi)
        assert joint_cdf(x, h, x0, BETA, phi) + upper_tail(x, h, x0, BETA, phi) \
            == pytest.approx(s, abs=1e-10)


class TestSingleBarrierPrices:
    @pytest.mark.parametrize("K,H,T", [
        (100.0, 130.0, 0.25), (100.0, 130.0, 1.0), (90.0, 120.0, 0.5),
        (110.0, 140.0, 2.0), (100.0, 105.0, 0.25), (80.0, 150.0, 1.0),
        (130.0, 125.0, 0.5),  # strike beyond barrier branch
    ])
    def test_uop_deterministic_oracle(self, market, K, H, T):
        g = 0.04 * T + 0.01
        contract = BarrierContract(ContractKind.UP_OUT_PUT, strike=K,
                                   maturity=T, upper_barrier=H)
        got = price_uop(contract, market, det_phi(g))
        want = market.discount(T) * uop_black(market.forward(T), K, H, g)
        assert got == pytest.approx(want, rel=1e-6)

    @pytest.mark.parametrize("K,L,T", [
        (100.0, 70.0, 0.25), (100.0, 70.0, 1.0), (90.0, 60.0, 0.5),
        (110.0, 80.0, 2.0), (100.0, 95.0, 0.25), (120.0, 50.0, 1.0),
        (60.0, 65.0, 0.5),  # strike below barrier branch
    ])
    def test_doc_deterministic_oracle(self, market, K, L, T):
        g = 0.04 * T + 0.01
        contract = BarrierContract(ContractKind.DOWN_OUT_CALL, strike=K,
                                   maturity=T, lower_barrier=L)
        got = price_doc(contract, market, det_phi(g))
        want = market.discount(T) * doc_black(market.forward(T), K, L, g)
        assert got == pytest.approx(want, rel=1e-6)

    @pytest.mark.parametrize("T", [0.25, 1.0])
    def test_uop_decomposition_identity(self, market, cir_regime1, T):
        contract = BarrierContract(ContractKind.UP_OUT_PUT, strike=100.0,
                                   maturity=T, upper_barrier=130.0)
        phi = ClockTransform(cir_regime1, T)
        direct = price_uop(contract, market, phi)
        decomposed = price_uop(contract, market, phi, cross_check=True)
        assert decomposed == pytest.approx(direct, abs=1e-8)

    @pytest.mark.parametrize("T", [0.25, 1.0])
    def test_doc_reflection_identity(self, market, cir_regime1, T):
        contract = BarrierContract(ContractKind.DOWN_OUT_CALL, strike=100.0,
                                   maturity=T, lower_barrier=70.0)
        phi = ClockTransform(cir_regime1, T)
        direct = price_doc(contract, market, phi)
        reflected = price_doc(contract, market, phi, cross_check=True)
        assert reflected == pytest.approx(direct, abs=1e-8)

    def test_geometry_violation(self, market, cir_regime1):
        contract = BarrierContract(ContractKind.UP_OUT_PUT, strike=100.0,
                                   maturity=1.0, upper_barrier=90.0)
        with pytest.raises(GeometryError):
            price_uop(contract, market, ClockTransform(cir_regime1, 1.0))

    def test_prices_nonnegative_all_clocks(self, market, cir_regime1,
                                           cir_regime2, sqou_regime1,
                                           markov_2state):
        for spec in (cir_regime1, cir_regime2, sqou_regime1, markov_2state):
            phi = ClockTransform(spec, 0.5)
            uop = price_uop(BarrierContract(ContractKind.UP_OUT_PUT, 100.0, 0.5,
                                            upper_barrier=130.0), market, phi)
            doc = price_doc(BarrierContract(ContractKind.DOWN_OUT_CALL, 100.0, 0.5,
                                            lower_barrier=70.0), market, phi)
            assert uop >= 0 and doc >= 0


class TestDkoSeries:
    def test_knocked_out_strike_geometry(self, market, cir_regime1):
        contract = BarrierContract(ContractKind.DKO_CALL, strike=135.0,
                                   maturity=1.0, lower_barrier=70.0,
                                   upper_barrier=130.0)
        A = dko_coefficients(contract, 50)
        assert np.all(A == 0.0)
        cache = build_transform_cache(cir_regime1, 0.0, 1.0,
                                      dirichlet_grid(70.0, 130.0, 200))
        assert price_dko(contract, market, cache).price == 0.0

    def test_coefficients_vs_quadrature(self):
        contract = BarrierContract(ContractKind.DKO_CALL, strike=100.0,
                                   maturity=1.0, lower_barrier=70.0,
                                   upper_barrier=130.0)
        A = dko_coefficients(contract, 50)
        l, h = math.log(70.0), math.log(130.0)
        a = h - l
        K = 100.0
        c = max(math.log(K), l)
        for n in (1, 2, 7, 25, 50):
            w = n * np.pi / a
            val, _ = quad(lambda x: (np.exp(x) - K) * np.exp(BETA * x)
                          * np.sin(w * (x - l)), c, h, limit=400, epsabs=1e-13)
            assert A[n - 1] == pytest.approx(val, rel=1e-10, abs=1e-13)

    def test_put_coefficients_vs_quadrature(self):
        contract = BarrierContract(ContractKind.DKO_PUT, strike=100.0,
                                   maturity=1.0, lower_barrier=70.0,
                                   upper_barrier=130.0)
        A = dko_coefficients(contract, 20)
        l, h = math.log(70.0), math.log(130.0)
        a = h - l
        K = 100.0
        d = min(math.log(K), h)
        for n in (1, 3, 11, 20):
            w = n * np.pi / a
            val, _ = quad(lambda x: (K - np.exp(x)) * np.exp(BETA * x)
                          * np.sin(w * (x - l)), l, d, limit=400, epsabs=1e-13)
            assert A[n - 1] == pytest.approx(val, rel=1e-10, abs=1e-13)

    def test_coefficient_decay_bound(self):
        contract = BarrierContract(ContractKind.DKO_CALL, strike=100.0,
                                   maturity=1.0, lower_barrier=70.0,
                                   upper_barrier=130.0)
        A = dko_coefficients(contract, 500)
        n = np.arange(1, 501)
        assert np.max(n * np.abs(A)) < 50.0 * np.max(np.abs(A[:5]))

    @pytest.mark.parametrize("put", [False, True])
    @pytest.mark.parametrize("g", [0.02, 0.0454, 0.185])
    def test_deterministic_vs_image_series(self, market, put, g):
        T = 1.0
        kind = ContractKind.DKO_PUT if put else ContractKind.DKO_CALL
        contract = BarrierContract(kind, strike=100.0, maturity=T,
                                   lower_barrier=70.0, upper_barrier=130.0)
        cache_grid = dirichlet_grid(70.0, 130.0, 400)
        # deterministic-clock cache built by hand
        from tcbm.clocks import TransformCache
        cache = TransformCache(key=("det", 0.0, T), grid=cache_grid,
                               log_values=-cache_grid * g)
        got = price_dko(contract, market, cache).price
        want = market.discount(T) * dko_black(market.forward(T), 100.0, 70.0,
                                              130.0, g, put=put)
        assert got == pytest.approx(want, rel=1e-8, abs=1e-10)

    def test_truncation_stability(self, market, cir_regime1):
        contract = BarrierContract(ContractKind.DKO_CALL, strike=100.0,
                                   maturity=0.25, lower_barrier=70.0,
                                   upper_barrier=130.0)
        cache = build_transform_cache(cir_regime1, 0.0, 0.25,
                                      dirichlet_grid(70.0, 130.0, 800))
        res = price_dko(contract, market, cache)
        res_doubled = price_dko(contract, market, cache,
                                n_max=min(2 * res.n_terms, 800))
        assert abs(res.price - res_doubled.price) < 1e-8

    def test_boundary_start_knocks_out(self, market, cir_regime1):
        T = 1.0
        cache = build_transform_cache(cir_regime1, 0.0, T,
                                      dirichlet_grid(70.0, 130.0, 300))
        # forward pinned (numerically) on the lower barrier
        L = market.forward(T) * (1 - 1e-8)
        contract = BarrierContract(ContractKind.DKO_CALL, strike=90.0,
                                   maturity=T, lower_barrier=L,
                                   upper_barrier=130.0)
        cache_b = build_transform_cache(cir_regime1, 0.0, T,
                                        dirichlet_grid(L, 130.0, 300))
        assert price_dko(contract, market, cache_b).price < 1e-6

    def test_grid_mismatch_rejected(self, market, cir_regime1):
        contract = BarrierContract(ContractKind.DKO_CALL, strike=100.0,
                                   maturity=1.0, lower_barrier=70.0,
                                   upper_barrier=130.0)
        bad = build_transform_cache(cir_regime1, 0.0, 1.0,
                                    dirichlet_grid(75.0, 130.0, 100))
        with pytest.raises(DomainError):
            price_dko(contract, market, bad)


class TestQuadratureBehavior:
    def test_tight_tolerance_honored(self, market, cir_regime1):
        contract = BarrierContract(ContractKind.DOWN_OUT_CALL, strike=100.0,
                                   maturity=1.0, lower_barrier=70.0)
        phi = ClockTransform(cir_regime1, 1.0)
        loose = price_doc(contract, market, phi,
                          cfg=QuadratureConfig(rel_tol=1e-6, abs_tol=1e-9))
        tight = price_doc(contract, market, phi,
                          cfg=QuadratureConfig(rel_tol=1e-11, abs_tol=1e-13))
        assert loose == pytest.approx(tight, rel=1e-6)
