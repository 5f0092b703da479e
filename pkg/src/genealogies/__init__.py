"""Simulation and statistical verification of Cannings genealogies and
their tree-valued limits."""

from . import cannings, harness, limits, measures, metrics, partitions, trees

__all__ = [
    "cannings", "harness", "limits", "measures", "metrics", "partitions",
    "trees",
]

__version__ = "0.1.0"
