"""Kron-based node aggregation and radialization of three-phase radial feeders."""

from feederkron.errors import ContractError, FeederKronError, SolverError, StructuralError, ValidationError
from feederkron.generate import GenParams, generate
from feederkron.grid import Branch, Network, Node, PhaseMask, assemble_admittance, load_network, validate
from feederkron.kron import Partition, kron_reduce, reduced_topology, solve_kept
from feederkron.model import ReducedModel, load_model, save_model, validate_model
from feederkron.radial import find_maximal_cliques, critical_nodes, radialize
from feederkron.reduce import ReductionConfig, run_reduction
from feederkron.scenario import ScenarioLibrary, load_library

__version__ = "0.1.0"

__all__ = [
    "Branch", "ContractError", "FeederKronError", "GenParams", "Network", "Node", "Partition",
    "PhaseMask", "ReducedModel", "ReductionConfig", "ScenarioLibrary", "SolverError",
    "StructuralError", "ValidationError", "assemble_admittance", "critical_nodes",
    "find_maximal_cliques", "generate", "kron_reduce", "load_library", "load_model",
    "load_network", "radialize", "reduced_topology", "run_reduction", "save_model",
    "solve_kept", "validate", "validate_model",
]
