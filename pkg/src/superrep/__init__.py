"""Super-replication prices and buy-and-hold hedges when some assets carry
proportional transaction costs."""

from .cone import CostMatrix, PolarSection, build_polar_section, cone_geq, liquidation_value
from .errors import InvariantError, NumericFailure
from .market import MarketModel, PathBatch, simulate
from .payoff import Growth, PayoffSpec, catalog_payoff, tabulated_payoff
from .pricer import PriceOptions, PriceReport, first_order_residual, price, price_with_offset

__version__ = "0.1.0"

__all__ = [
    "CostMatrix", "PolarSection", "build_polar_section", "cone_geq", "liquidation_value",
    "InvariantError", "NumericFailure", "MarketModel", "PathBatch", "simulate",
    "Growth", "PayoffSpec", "catalog_payoff", "tabulated_payoff",
    "PriceOptions", "PriceReport", "first_order_residual", "price", "price_with_offset",
]
