"""Polar disk mesh and the discrete Wentzell Dirichlet form.

Nodes are finite-volume cell centres of a polar tensor grid on the unit disk
(half-offset radii, no node at the origin) plus one node per angular sector
on the unit circle.  The stiffness form is assembled from an edge list so
that symmetry, conservativity and stationarity of the uniform density hold
exactly, independent of resolution.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

RADIAL = 0
ANGULAR = 1
BOUNDARY = 2  # boundary-tangential
NORMAL = 3  # interior outer ring <-> boundary

EDGE_KINDS = ("radial", "angular", "boundary-tangential", "normal-coupling")


@dataclass(frozen=True, eq=False)
class DiskMesh:
    n_r: int
    n_theta: int
    radius: np.ndarray  # per node
    theta: np.ndarray  # per node
    lam_w: np.ndarray  # interior cell areas
    sig_w: np.ndarray  # boundary arc lengths
    c_norm: float
    edge_i: np.ndarray
    edge_j: np.ndarray
    edge_kind: np.ndarray
    edge_base: np.ndarray  # conductance with a = 1

    @property
    def dr(self) -> float:
        return 1.0 / self.n_r

    @property
    def dtheta(self) -> float:
        return 2.0 * np.pi / self.n_theta

    @property
    def n_interior(self) -> int:
        return self.n_r * self.n_theta

    @property
    def node_count(self) -> int:
        return self.n_interior + self.n_theta

    @property
    def interior(self) -> slice:
        return slice(0, self.n_interior)

    @property
    def boundary(self) -> slice:
        return slice(self.n_interior, self.node_count)

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weight of every node (cell area or arc length)."""
        return np.concatenate([self.lam_w, self.sig_w])

    @property
    def mu_weights(self) -> np.ndarray:
        return self.c_norm * self.weights

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.radius * np.cos(self.theta), self.radius * np.sin(self.theta)])

    @property
    def outer_ring(self) -> np.ndarray:
        """Indices of the outermost interior nodes, ordered like the boundary nodes."""
        return (self.n_r - 1) * self.n_theta + np.arange(self.n_theta)

    @property
    def boundary_nodes(self) -> np.ndarray:
        return self.n_interior + np.arange(self.n_theta)

    def node(self, i: int, j: int) -> int:
        """Index of interior node (i, j) with 1 <= i <= n_r."""
        return (i - 1) * self.n_theta + (j % self.n_theta)

    def boundary_cap(self, center: float, width: float) -> np.ndarray:
        """Boundary nodes whose angle lies within ``width/2`` of ``center``."""
        th = self.theta[self.boundary]
        gap = np.abs((th - center + np.pi) % (2 * np.pi) - np.pi)
        return self.n_interior + np.flatnonzero(gap <= 0.5 * width + 1e-12)

    def summary(self) -> dict:
        return {
            "n_r": self.n_r,
            "n_theta": self.n_theta,
            "node_count": self.node_count,
            "lam_total": float(self.lam_w.sum()),
            "sig_total": float(self.sig_w.sum()),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def build_disk_mesh(n_r: int, n_theta: int) -> DiskMesh:
    """Build the polar mesh with ``n_r`` radial layers and ``n_theta`` sectors."""
    if int(n_r) != n_r or n_r < 1:
        raise ValueError(f"n_r must be a positive integer, got {n_r!r}")
    if int(n_theta) != n_theta or n_theta < 3:
        raise ValueError(f"n_theta must be an integer >= 3, got {n_theta!r}")
    n_r, n_theta = int(n_r), int(n_theta)
    dr = 1.0 / n_r
    dth = 2.0 * np.pi / n_theta

    r_i = (np.arange(1, n_r + 1) - 0.5) * dr
    th_j = np.arange(n_theta) * dth
    radius = np.concatenate([np.repeat(r_i, n_theta), np.ones(n_theta)])
    theta = np.concatenate([np.tile(th_j, n_r), th_j])

    # (i - 1/2) dr^2 dth telescopes to pi exactly in exact arithmetic
    lam_w = np.repeat(r_i * dr * dth, n_theta)
    sig_w = np.full(n_theta, dth)

    ii, jj, kind, cond = [], [], [], []
    j = np.arange(n_theta)
    jn = (j + 1) % n_theta
    for i in range(1, n_r + 1):
        base = (i - 1) * n_theta
        ii.append(base + j)
        jj.append(base + jn)
        kind.append(np.full(n_theta, ANGULAR))
        cond.append(np.full(n_theta, dr / (r_i[i - 1] * dth)))
        if i < n_r:
            ii.append(base + j)
            jj.append(base + n_theta + j)
            kind.append(np.full(n_theta, RADIAL))
            cond.append(np.full(n_theta, i * dr * dth / dr))
    nb = n_r * n_theta
    ii.append(nb + j)
    jj.append(nb + jn)
    kind.append(np.full(n_theta, BOUNDARY))
    cond.append(np.full(n_theta, 1.0 / dth))
    ii.append((n_r - 1) * n_theta + j)
    jj.append(nb + j)
    kind.append(np.full(n_theta, NORMAL))
    cond.append(np.full(n_theta, 2.0 * dth / dr))

    return DiskMesh(
        n_r=n_r,
        n_theta=n_theta,
        radius=radius,
        theta=theta,
        lam_w=lam_w,
        sig_w=sig_w,
        c_norm=1.0 / (lam_w.sum() + sig_w.sum()),
        edge_i=np.concatenate(ii),
        edge_j=np.concatenate(jj),
        edge_kind=np.concatenate(kind),
        edge_base=np.concatenate(cond),
    )


def edge_laplacian(n: int, ei: np.ndarray, ej: np.ndarray, w: np.ndarray) -> sp.csr_matrix:
    """Weighted graph Laplacian ``sum_e w_e (e_i - e_j)(e_i - e_j)^T``."""
    rows = np.concatenate([ei, ej, ei, ej])
    cols = np.concatenate([ej, ei, ei, ej])
    vals = np.concatenate([-w, -w, w, w])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@dataclass(frozen=True, eq=False)
class OperatorSet:
    """Stiffness form ``L`` and mu-weights ``M`` for one value of ``a``.

    ``f @ L @ f`` approximates ``int |grad f|^2 dlambda + a int |grad_tau f|^2 dsigma``,
    i.e. the Dirichlet form divided by ``c_norm``.  The generator acting on
    mu-densities is ``Q = -W^{-1} L`` with ``W`` the quadrature weights, so
    that ``<-Qf, f>_mu = c_norm f.L.f = E(f)``.
    """

    mesh: DiskMesh
    a: float
    conductance: np.ndarray  # per edge, a-scaled
    L: sp.csr_matrix
    M: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def weights(self) -> np.ndarray:
        return self.mesh.weights

    @property
    def incidence(self) -> sp.csr_matrix:
        """Signed edge-node incidence ``D`` with ``L = D^T diag(conductance) D``."""
        if "D" not in self._cache:
            m = self.mesh
            k = np.arange(len(m.edge_i))
            rows = np.concatenate([k, k])
            cols = np.concatenate([m.edge_i, m.edge_j])
            vals = np.concatenate([np.ones_like(k), -np.ones_like(k)]).astype(float)
            self._cache["D"] = sp.csr_matrix((vals, (rows, cols)), shape=(len(k), m.node_count))
        return self._cache["D"]

    def apply_stiffness(self, f: np.ndarray) -> np.ndarray:
        """``L f`` in edge form; annihilates constants exactly."""
        D = self.incidence
        return D.T @ (self.conductance * (D @ f))

    def generator(self) -> sp.csr_matrix:
        if "Q" not in self._cache:
            self._cache["Q"] = (-sp.diags(1.0 / self.weights) @ self.L).tocsr()
        return self._cache["Q"]

    def apply_generator(self, f: np.ndarray) -> np.ndarray:
        return -self.apply_stiffness(f) / self.weights

    def dirichlet_form(self, f: np.ndarray, g: np.ndarray | None = None) -> float:
        D = self.incidence
        df = D @ f
        dg = df if g is None else D @ g
        return float(self.mesh.c_norm * np.sum(self.conductance * df * dg))

    def weighted_stiffness(self, omega: np.ndarray, gamma: np.ndarray) -> sp.csr_matrix:
        """Stiffness form with every edge weighted by a local density.

        Interior and radial/angular edges use the arithmetic mean of the two
        interior densities, boundary-tangential edges the mean of the two
        boundary densities, and normal-coupling edges the interior density
        of the outer cell (the flux ``omega * d_N phi`` leaves the interior).
        """
        m = self.mesh
        u = np.concatenate([omega, gamma])
        ei, ej, kind = m.edge_i, m.edge_j, m.edge_kind
        dens = 0.5 * (u[ei] + u[ej])
        normal = kind == NORMAL
        dens[normal] = u[ei[normal]]
        return edge_laplacian(m.node_count, ei, ej, self.conductance * dens)

    def block(self, kind: int) -> sp.csr_matrix:
        """Contribution of a single edge kind to ``L``."""
        m = self.mesh
        sel = m.edge_kind == kind
        return edge_laplacian(m.node_count, m.edge_i[sel], m.edge_j[sel], self.conductance[sel])


def assemble_operators(mesh: DiskMesh, a: float) -> OperatorSet:
    if not np.isfinite(a) or a <= 0:
        raise ValueError(f"boundary diffusion coefficient must be > 0, got {a!r}")
    cond = mesh.edge_base.copy()
    cond[mesh.edge_kind == BOUNDARY] *= a
    L = edge_laplacian(mesh.node_count, mesh.edge_i, mesh.edge_j, cond)
    return OperatorSet(mesh=mesh, a=float(a), conductance=cond, L=L, M=mesh.mu_weights)
