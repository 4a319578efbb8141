"""Closed-loop distribution system state estimation.

Seasonal sparse Bayesian load experts are combined by a regret-minimizing
forecaster, feed pseudo-measurements into a branch-current state estimator,
and are refined with the load estimates recovered from its voltages.

Modules
-------
grid_model
    Radial three-phase feeders and the sweep power flow.
dataset
    Smart-meter histories, synthetic data and feature vectors.
rvm
    Relevance vector regression.
aggregator
    Seasonal expert weighting by regret.
bcse
    Weighted least-squares branch-current state estimation.
dle
    Load estimation from estimated voltages.
pipeline
    Offline training, the online loop, evaluation and baselines.
cli
    ``loopdsse`` command line.
"""

from . import aggregator, bcse, dataset, dle, grid_model, pipeline, rvm

__version__ = "0.1.0"

__all__ = ["aggregator", "bcse", "dataset", "dle", "grid_model", "pipeline", "rvm", "__version__"]
