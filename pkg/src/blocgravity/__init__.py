"""Border and bloc trade-cost effects from gravity panels, with general-equilibrium counterfactuals."""

from .datamodel import (
    DUMMY_PRESETS,
    BlocTaxonomy,
    GravityDesign,
    Group,
    PairDummy,
    Panel,
    TradeFlowRecord,
    generate_pair_dummies,
    resolve_group,
)
from .effects import TariffEquivalent, TariffSeries, build_series, tariff_equivalent, tariff_se_delta
from .geq import BaselineEconomy, CounterfactualSolution, HatAlgebraEquilibrium, Shock, solve
from .ppml import EstimationResult, ModelSpec, PPMLGravity, clustered_covariance, predicted_flows, wald_equality

__version__ = "0.1.0"

__all__ = [
    "DUMMY_PRESETS",
    "BlocTaxonomy",
    "GravityDesign",
    "Group",
    "PairDummy",
    "Panel",
    "TradeFlowRecord",
    "generate_pair_dummies",
    "resolve_group",
    "TariffEquivalent",
    "TariffSeries",
    "build_series",
    "tariff_equivalent",
    "tariff_se_delta",
    "BaselineEconomy",
    "CounterfactualSolution",
    "HatAlgebraEquilibrium",
    "Shock",
    "solve",
    "EstimationResult",
    "ModelSpec",
    "PPMLGravity",
    "clustered_covariance",
    "predicted_flows",
    "wald_equality",
]
