"""Two-swarm walling simulator with a hand-designed and a learned controller."""

__version__ = "0.1.0"
