"""Bayesian quickest detection of a Poisson rate change with a phase-type
disorder prior: exact posterior dynamics, certified value iteration on the
belief simplex, online detectors, and Monte Carlo risk evaluation."""

from .phase_type import (
    BeliefPoint,
    PhaseTypeGenerator,
    build_erlang,
    build_hyperexponential,
    discounted_survival,
    distribution,
    mean_absorption,
    sample_absorption,
    validate_generator,
)
from .flow import (
    ModelSpec,
    Trajectory,
    build_trajectory,
    first_arrival_law,
    flow,
    jump,
    trajectory,
)
from .scenario import Scenario, sample_batch, sample_scenario
from .grid import SimplexGrid

__version__ = "0.1.0"
