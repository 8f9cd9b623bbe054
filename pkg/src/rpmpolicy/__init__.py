"""Learning and offline evaluation of capacity-constrained patient targeting policies."""
__version__ = "0.1.0"
