"""Metrics, the experiment harness, and the command-line surface."""

from .harness import AggregateRecord, ExperimentResult, SeedRecord, aggregate, derived_seeds, run_experiment
from .metrics import attribution, pehe

__all__ = [
    "AggregateRecord",
    "ExperimentResult",
    "SeedRecord",
    "aggregate",
    "attribution",
    "derived_seeds",
    "pehe",
    "run_experiment",
]
