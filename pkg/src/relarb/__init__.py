"""relarb: robust relative-arbitrage engine.

Computes the smallest initial-capital fraction that outperforms the market
under every admissible covariance configuration, extracts the investment rule
that achieves it, and verifies both by simulation.
"""

__version__ = "0.1.0"

from .errors import (CflError, ConfigError, ConstraintViolationError,
                     NonFiniteError, RelarbError, SchemeError)
from .grids import GridFunction, GridSpec, PolicyField
from .hjb import (pdi_residual, required_steps, solve_hjb, solve_linear,
                  solve_pucci)
from .portfolio import (GameEstimate, InvestmentRule, SaddleReport,
                        WealthLedger, backtest, constant_rule, custom_rule,
                        evaluate_rule, game_value, generated_rule, market_rule,
                        saddle_check)
from .sde import (ContainmentEstimate, MarketModelSpec, PathBundle, SimConfig,
                  TrendReport, containment_probability, market_weights,
                  simulate, supermartingale_check)
from .uncertainty import (CandidateScan, ConditionReport, UncertaintySetFamily,
                          arbitrage_sufficiency, check_admissibility,
                          covariance_set)
from .volstab import (BesqEnsemble, OracleEstimate, least_favorable_model,
                      oracle_u, solve_example_pde, volstab_model)

__all__ = [
    "__version__",
    "CandidateScan", "UncertaintySetFamily", "ConditionReport",
    "covariance_set", "check_admissibility", "arbitrage_sufficiency",
    "GridSpec", "GridFunction", "PolicyField",
    "solve_linear", "solve_hjb", "solve_pucci", "pdi_residual",
    "required_steps",
    "MarketModelSpec", "SimConfig", "PathBundle", "simulate",
    "containment_probability", "supermartingale_check", "market_weights",
    "ContainmentEstimate", "TrendReport",
    "InvestmentRule", "market_rule", "constant_rule", "generated_rule",
    "custom_rule", "evaluate_rule", "backtest", "game_value", "saddle_check",
    "WealthLedger", "GameEstimate", "SaddleReport",
    "oracle_u", "least_favorable_model", "volstab_model", "solve_example_pde",
    "BesqEnsemble", "OracleEstimate",
    "RelarbError", "CflError", "SchemeError", "NonFiniteError",
    "ConstraintViolationError", "ConfigError",
]
