"""Spectral belief propagation with symbolic rule closure on sparse graphs."""

__version__ = "0.1.0"

from . import analysis, filters, graph, rules, taskgen, training

__all__ = ["analysis", "filters", "graph", "rules", "taskgen", "training"]
