"""Long-tailed classification with Gaussian-mixture-likelihood losses."""

from ._core import (
    adjusted_nll,
    config_hash,
    evaluate,
    exact_mi,
    exponential_profile,
    gml_loss,
    load_config,
    make_longtail,
    pareto_profile,
    plan_capacities,
    run_desk_seed,
    train,
    verify,
)

__all__ = [
    "adjusted_nll",
    "config_hash",
    "evaluate",
    "exact_mi",
    "exponential_profile",
    "gml_loss",
    "load_config",
    "make_longtail",
    "pareto_profile",
    "plan_capacities",
    "run_desk_seed",
    "train",
    "verify",
]
