"""Simulation and analysis of the entangled mechanical oscillator protocol."""

from .dynamics import NoiseModel
from .measurement import DetectionModel, FitResult, ParityPoint, PopulationEstimate
from .protocol import ExperimentPlan, build_plan, execute

__all__ = ["NoiseModel", "DetectionModel", "FitResult", "ParityPoint", "PopulationEstimate",
           "ExperimentPlan", "build_plan", "execute"]
__version__ = "0.1.0"
