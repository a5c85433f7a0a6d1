"""Quantum-key-secured cooperative secondary control for islanded AC microgrids."""

from .config import ScenarioConfig, load_config, parse_config
from .runner import RunResult, RunSummary, run, simulate
from .topology import AdjacencyMatrix, PinningVector, consensus_gain, perturb_matrix

__all__ = [
    "AdjacencyMatrix",
    "PinningVector",
    "RunResult",
    "RunSummary",
    "ScenarioConfig",
    "consensus_gain",
    "load_config",
    "parse_config",
    "perturb_matrix",
    "run",
    "simulate",
]
__version__ = "0.1.0"
