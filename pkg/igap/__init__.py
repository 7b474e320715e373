"""Spectral graph contrastive pre-training and inductive graph alignment prompts."""

from .errors import IgapError
from .graph_data import Graph, GraphSet, load_graph, save_graph
from .spectral import SpectralBasis, decompose, gft, igft

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "GraphSet",
    "IgapError",
    "SpectralBasis",
    "decompose",
    "gft",
    "igft",
    "load_graph",
    "save_graph",
]
