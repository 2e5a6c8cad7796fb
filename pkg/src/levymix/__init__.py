"""Simulation and coupling-based mixing verification for SPDEs driven by
degenerate rotationally symmetric stable Levy noise."""

__version__ = "0.1.0"
