"""Measures on the closed disk split into interior and boundary densities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import DiskMesh

MASS_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Rho:
    """A measure ``omega * lambda + gamma * sigma`` on the mesh.

    ``omega`` is a density per interior node with respect to area,
    ``gamma`` a density per boundary node with respect to arc length.
    """

    mesh: DiskMesh
    omega: np.ndarray
    gamma: np.ndarray
    probability: bool = True

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float)
        ga = np.asarray(self.gamma, dtype=float)
        if om.shape != (self.mesh.n_interior,) or ga.shape != (self.mesh.n_theta,):
            raise ValueError("density arrays do not match the mesh")
        if not (np.all(np.isfinite(om)) and np.all(np.isfinite(ga))):
            raise ValueError("densities must be finite")
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "gamma", ga)
        if self.probability and abs(self.mass - 1.0) > 1e-10:
            raise ValueError(f"probability measure has mass {self.mass!r}")

    @classmethod
    def from_density(cls, mesh: DiskMesh, f: np.ndarray, probability: bool = True) -> "Rho":
        """Measure ``f * mu`` from a density ``f`` with respect to ``mu``."""
        u = mesh.c_norm * np.asarray(f, dtype=float)
        return cls(mesh, u[mesh.interior], u[mesh.boundary], probability)

    @classmethod
    def from_masses(cls, mesh: DiskMesh, masses: np.ndarray, probability: bool = True) -> "Rho":
        u = np.asarray(masses, dtype=float) / mesh.weights
        return cls(mesh, u[mesh.interior], u[mesh.boundary], probability)

    @property
    def values(self) -> np.ndarray:
        """Concatenated densities (omega, gamma)."""
        return np.concatenate([self.omega, self.gamma])

    @property
    def density(self) -> np.ndarray:
        """``d rho / d mu`` per node."""
        return self.values / self.mesh.c_norm

    @property
    def masses(self) -> np.ndarray:
        return self.values * self.mesh.weights

    @property
    def mass(self) -> float:
        return float(self.omega @ self.mesh.lam_w + self.gamma @ self.mesh.sig_w)

    @property
    def boundary_mass(self) -> float:
        return float(self.gamma @ self.mesh.sig_w)

    @property
    def trace_mismatch(self) -> float:
        """``sup_j |omega_outer(j) - gamma(j)| / max gamma``."""
        outer = self.omega[self.mesh.outer_ring]
        scale = float(np.max(np.abs(self.gamma)))
        if scale == 0.0:
            return 0.0 if np.all(outer == 0) else np.inf
        return float(np.max(np.abs(outer - self.gamma)) / scale)

    def is_nonnegative(self, tol: float = 0.0) -> bool:
        return bool(np.min(self.values) >= -tol)


def stationary_measure(mesh: DiskMesh) -> Rho:
    """The invariant law ``mu = c (lambda + sigma)``: constant density ``c_norm``."""
    return Rho(mesh, np.full(mesh.n_interior, mesh.c_norm), np.full(mesh.n_theta, mesh.c_norm))


def angular_profile(mesh: DiskMesh, amplitude: float = 0.5) -> Rho:
    """Trace-matched datum ``f0 = 1 + amplitude cos(theta)`` (radially constant)."""
    return Rho.from_density(mesh, 1.0 + amplitude * np.cos(mesh.theta))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
