"""Barrier pricing and calibration under stochastic-clock volatility models.

The log-forward is modeled as a Brownian motion run on a random increasing
clock (integrated activity). With independent drivers, single-barrier prices
reduce to one real oscillatory integral in the clock's Laplace transform and
double-barrier prices to a Dirichlet sine series on a fixed transform grid.
Correlation between drivers enters through a perturbation expansion whose
coefficients come from a Duhamel Monte Carlo estimator or forced implicit
solves, resummed with pole-monitored rational approximants. A staged
calibrator fits clock parameters from vanillas and variance swaps, then the
correlation from cached expansion coefficients.
"""

from .barrier import (BarrierContract, ContractKind, DkoResult, MarketEnv,
                      QuadratureConfig, dirichlet_grid, dko_coefficients,
                      joint_cdf, killed_density, price_dko, price_doc,
                      price_uop, survival_probability)
from .calibrate import (BarrierQuote, CalibrationDataset, CalibrationResult,
                        PipelineConfig, VarSwapQuote, VixProxyQuote,
                        fit_rho_cached, init_cir_from_varswaps,
                        init_two_factor_grid, objective_eval,
                        run_stage_pipeline)
from .clocks import (CirClock, ClockTransform, MarkovSwitchingClock,
                     RiccatiSolution, SquaredOuClock, TimeDepCirClock,
                     TransformCache, TwoFactorCirClock, build_transform_cache,
                     clock_digest, expected_clock, phi_cir_closed_form,
                     phi_conditional, phi_markov_switching,
                     phi_riccati_numeric, phi_squared_ou)
from .errors import (ConvergenceError, DegenerateSystemError, DomainError,
                     GeometryError, IntegrationError, NotComputableError,
                     TcbmError, UnsupportedFamilyError, ValidationError)
from .leverage import (ExpansionCoefficients, ForcingTable, PdeConfig,
                       baseline_u0, build_forcing_table, compute_expansion,
                       duhamel_coefficient_1, forced_pde_coefficient,
                       forcing_mixed_derivative, residual_error_indicator)
from .mc import (McConfig, McEstimate, price_barrier_mc_correlated,
                 price_barrier_mc_rho0, simulate_clock_path)
from .pade import (FallbackPolicy, PadeApproximant, evaluate_with_fallback,
                   pade_fit, taylor_eval)
from .vanilla import (VanillaQuote, char_fn, cos_vanilla_price, implied_vol,
                      variance_swap_strike)

__version__ = "0.1.0"
