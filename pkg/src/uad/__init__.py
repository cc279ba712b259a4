"""Angular-perception end-to-end planner on a synthetic driving world."""

__version__ = "0.1.0"
