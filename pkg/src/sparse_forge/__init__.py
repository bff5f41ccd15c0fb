"""Numerical toolkit for sparse MoE training: scaling laws, checkpoint
merging, routing, FP8 emulation, pipeline scheduling and post-training
rewards."""
from .exceptions import CapacityError, ConvergenceError, InvalidInputError, PlanError, SegmentationError

__version__ = "0.1.0"
