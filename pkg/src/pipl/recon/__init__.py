"""Inverse solvers: potential and Taylor-coefficient recovery through CGO
Fourier probing, initial-data recovery by adjoint-gradient Tikhonov
iteration, boundary null control, and Runge approximation fitting."""

from .fourier import FourierSample, FourierSampleSet, frequency_lattice
from .initial import InitialDataMap, recover_initial, stability_curve
from .control import BTStructure, control_basis, null_control
from .potential import (
    PotentialProbe,
    ReconstructionResult,
    positive_solution,
    recover_potential,
    recover_taylor,
    reciprocity_report,
    synthesize_potential_probes,
    synthesize_taylor_probes,
)
from .runge import RegionMask, runge_basis, runge_fit

__all__ = [
    "BTStructure",
    "FourierSample",
    "FourierSampleSet",
    "InitialDataMap",
    "PotentialProbe",
    "ReconstructionResult",
    "RegionMask",
    "control_basis",
    "frequency_lattice",
    "null_control",
    "positive_solution",
    "reciprocity_report",
    "recover_initial",
    "recover_potential",
    "recover_taylor",
    "runge_basis",
    "runge_fit",
    "stability_curve",
    "synthesize_potential_probes",
    "synthesize_taylor_probes",
]
