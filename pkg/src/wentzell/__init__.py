"""Wentzell heat flow on the unit disk: operators, Otto calculus, refraction
distance and JKO minimizing movements."""
from .mesh import DiskMesh, OperatorSet, assemble_operators, build_disk_mesh
from .rho import Rho, angular_profile, stationary_measure
from . import dynamics, metric, otto, transport

__all__ = [
    "DiskMesh",
    "OperatorSet",
    "Rho",
    "angular_profile",
    "dynamics",
    "metric",
    "otto",
    "transport",
    "assemble_operators",
    "build_disk_mesh",
    "stationary_measure",
]
