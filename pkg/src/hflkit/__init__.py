"""Nonlinear single-factor (HFL) asset-pricing toolkit.

Sieve least-squares estimation of r_it = h(f_t lambda_i) + e_it together with
Fama-MacBeth tests, PCA-family baselines, double-selection Lasso and
expanding-window portfolio sorts.
"""

__version__ = "0.1.0"

from .panel import (FactorPanel, PanelError, PanelSummary, ReturnPanel, cross_section_means,
                    load_factors, load_panel, summarize, write_factors, write_panel)
from .sieve import (FitError, FocDiagnostics, HflConfig, HflFit, HflParams, fit_hfl,
                    foc_diagnostics, gradient_fl, init_svd, loss, poly_eval, refit_coeffs)
from .econometrics import (BetaMatrix, FmSeries, OlsResult, XsTestResult, fama_macbeth,
                           newey_west_se, ols, time_series_betas, white_se, xs_test)
from .baselines import (PcaResult, kernel_pca_factors, pca_factors, power_factors,
                        rp_pca_factors)
from .selection import CvReport, DsResult, LassoResult, cv_lasso, double_selection, lasso
from .backtest import (BacktestConfig, PortfolioSeries, alpha_regression, expanding_backtest,
                       performance_stats)
from .synth import SyntheticTruth, recovery_report, simulate_hfl, simulate_multifactor
