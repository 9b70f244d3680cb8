"""Evolutionary-game model of information forwarding on social networks."""

from .game import (
    PAYOFF_CASES,
    DynamicsCoefficients,
    PayoffMatrix,
    PopulationState,
    SelectionIntensity,
    UpdateRule,
    coefficients_complete,
    fitness,
    mean_fitness_by_strategy,
    replicator_step_complete,
)
from .graphs import (
    DegreeProfile,
    Graph,
    degree_profile,
    gen_ba,
    gen_complete,
    gen_er,
    gen_regular,
    load_edge_list,
    neighbor_degree_mean,
)
from .trajectory import Trajectory

__version__ = "0.1.0"
