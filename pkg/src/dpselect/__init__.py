"""Private selection mechanisms under heterogeneous candidate sensitivities."""

from dpselect.core import (DEFAULT_SENSITIVITY_FLOOR, Mechanism, MechanismSpec,
                           PrivacyBudget, RngStream, SelectionOutcome,
                           SelectionProblem, as_generator, make_problem,
                           random_select)
from dpselect.mechanisms import (combined_gem, gem, gem_transform, krr, mgem,
                                 rnm, rnm_laplace, rnmh, rs_gamma, select,
                                 select_many)
from dpselect.noise import StoppingRule, sample_stopping_count

__all__ = [
    "DEFAULT_SENSITIVITY_FLOOR", "Mechanism", "MechanismSpec", "PrivacyBudget",
    "RngStream", "SelectionOutcome", "SelectionProblem", "StoppingRule",
    "as_generator", "combined_gem", "gem", "gem_transform", "krr",
    "make_problem", "mgem", "random_select", "rnm", "rnm_laplace", "rnmh",
    "rs_gamma", "sample_stopping_count", "select", "select_many",
]

__version__ = "0.1.0"
