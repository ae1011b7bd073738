"""Surrogate-assisted multi-objective evolutionary architecture search in numpy."""

from .engine import SearchConfig, run_search
from .genotype import CellGenotype, Individual, MacroConfig, NodeGene, SearchSpace
from .moea import ObjectiveVector, environmental_selection, fast_nondominated_sort

__version__ = "0.1.0"

__all__ = [
    "CellGenotype",
    "Individual",
    "MacroConfig",
    "NodeGene",
    "ObjectiveVector",
    "SearchConfig",
    "SearchSpace",
    "environmental_selection",
    "fast_nondominated_sort",
    "run_search",
]
