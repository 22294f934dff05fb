"""Policy optimization for flow policies with signed, reweighted target measures.

Stage I turns a batch of action values into target-measure weights
(:mod:`simpo.normalizer`); Stage II projects them onto a flow policy by
weighted conditional flow matching (:mod:`simpo.flow`). :mod:`simpo.oracle`
holds closed-form ground truth and :mod:`simpo.bandit` the toy experiments.
"""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    BracketError,
    ConfigError,
    DomainError,
    InfeasibleError,
    NonFiniteError,
    ShapeError,
    SimpoError,
    SingularityError,
    UnsupportedError,
)
from .flow import ReweightedFlowMatcher  # noqa: E402
from .normalizer import TargetMeasureWeighter, normalized_weights, solve_nu  # noqa: E402
from .weighting import WeightingScheme  # noqa: E402

__all__ = [
    "__version__",
    "BracketError",
    "ConfigError",
    "DomainError",
    "InfeasibleError",
    "NonFiniteError",
    "ShapeError",
    "SimpoError",
    "SingularityError",
    "UnsupportedError",
    "ReweightedFlowMatcher",
    "TargetMeasureWeighter",
    "WeightingScheme",
    "normalized_weights",
    "solve_nu",
]
