"""Otto-calculus layer: weighted norms, potentials, entropy and its gradient,
the Hamiltonian/Lagrangian pair and the energy-dissipation bookkeeping.

Conventions.  A ``Rho`` carries densities ``u = (omega, gamma)`` with respect
to area and arc length.  A tangent perturbation ``s`` is a rate of change of
those densities, and it is paired with a potential ``phi`` through the
quadrature weights ``W``: ``<s, phi> = sum(W * s * phi)``.  The density
weighted stiffness ``L_rho`` realizes

    ||phi||_rho^2 = int |grad phi|^2 omega + a int |grad_tau phi|^2 gamma.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import xlogy

from .mesh import OperatorSet, assemble_operators
from .rho import Rho

DEFAULT_TRACE_TOL = 1e-2
ZERO_MASS_TOL = 1e-10


class SingularWeightError(ValueError):
    """The density vanishes somewhere, so the weighted elliptic problem is singular."""


class GradientUndefined(ValueError):
    """Trace condition violated: the entropy has no Otto gradient at this point."""


@dataclass(frozen=True, eq=False)
class TangentPerturbation:
    s_o: np.ndarray
    s_b: np.ndarray

    @classmethod
    def from_vector(cls, mesh, s: np.ndarray) -> "TangentPerturbation":
        s = np.asarray(s, dtype=float)
        return cls(s[mesh.interior].copy(), s[mesh.boundary].copy())

    @classmethod
    def from_weighted(cls, mesh, w: np.ndarray) -> "TangentPerturbation":
        """Perturbation whose per-node mass rate is ``w``."""
        return cls.from_vector(mesh, np.asarray(w, dtype=float) / mesh.weights)

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.s_o, self.s_b])

    def weighted(self, mesh) -> np.ndarray:
        return self.values * mesh.weights

    def total(self, mesh) -> float:
        return float(self.weighted(mesh).sum())

    def __add__(self, other):
        return TangentPerturbation(self.s_o + other.s_o, self.s_b + other.s_b)

    def __sub__(self, other):
        return TangentPerturbation(self.s_o - other.s_o, self.s_b - other.s_b)

    def __neg__(self):
        return TangentPerturbation(-self.s_o, -self.s_b)

    def __mul__(self, k: float):
        return TangentPerturbation(k * self.s_o, k * self.s_b)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class Potential:
    phi: np.ndarray

    @classmethod
    def normalized(cls, mesh, phi: np.ndarray) -> "Potential":
        phi = np.asarray(phi, dtype=float)
        w = mesh.mu_weights
        return cls(phi - (w @ phi) / w.sum())


def _operators(rho: Rho, a) -> OperatorSet:
    if isinstance(a, OperatorSet):
        return a
    cache = rho.mesh.__dict__.setdefault("_ops_cache", {})
    key = float(a)
    if key not in cache:
        cache[key] = assemble_operators(rho.mesh, key)
    return cache[key]


def _phi(xi) -> np.ndarray:
    return xi.phi if isinstance(xi, Potential) else np.asarray(xi, dtype=float)


def entropy(rho: Rho) -> float:
    """Relative entropy ``sum M_i f_i log f_i`` with ``0 log 0 = 0``."""
    if not rho.is_nonnegative():
        raise ValueError("entropy needs a nonnegative measure")
    f = rho.density
    return float(rho.mesh.mu_weights @ xlogy(f, f))


def potential_norm(rho: Rho, xi, a) -> float:
    """``||xi||_rho^2`` via the density-weighted stiffness form."""
    ops = _operators(rho, a)
    phi = _phi(xi)
    Lr = ops.weighted_stiffness(rho.omega, rho.gamma)
    return float(phi @ (Lr @ phi))


def _check_zero_mass(mesh, s: TangentPerturbation) -> None:
    w = s.weighted(mesh)
    tot = w.sum()
    if abs(tot) > ZERO_MASS_TOL * max(1.0, float(np.abs(w).sum())):
        raise ValueError(f"tangent perturbation must have zero total mass, got {tot:.3e}")


def _project_zero_mass(mesh, w: np.ndarray) -> np.ndarray:
    # the grounded solve silently dumps any mass defect on node 0
    return w - mesh.weights * (w.sum() / mesh.weights.sum())


def _solve_weighted(Lr: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    # ground node 0; the graph is connected so the reduced form is SPD
    A = Lr[1:, 1:].tocsc()
    x = np.zeros(Lr.shape[0])
    x[1:] = spla.spsolve(A, b[1:])
    return x


def identify_potential(rho: Rho, s: TangentPerturbation, a) -> Potential:
    """Solve ``L_rho phi = W s`` and return the mu-centred potential."""
    if np.min(rho.values) <= 0:
        raise SingularWeightError("identify_potential needs a strictly positive density")
    ops = _operators(rho, a)
    mesh = rho.mesh
    _check_zero_mass(mesh, s)
    b = _project_zero_mass(mesh, s.weighted(mesh))
    if not np.any(b):
        return Potential(np.zeros(mesh.node_count))
    Lr = ops.weighted_stiffness(rho.omega, rho.gamma)
    return Potential.normalized(mesh, _solve_weighted(Lr, b))


def forward_image(rho: Rho, phi, a) -> TangentPerturbation:
    """``s`` with ``W s = L_rho phi``: the perturbation generated by ``phi``."""
    ops = _operators(rho, a)
    Lr = ops.weighted_stiffness(rho.omega, rho.gamma)
    return TangentPerturbation.from_weighted(rho.mesh, Lr @ _phi(phi))


def pairing(mesh, s: TangentPerturbation, xi) -> float:
    return float(s.weighted(mesh) @ _phi(xi))


def perturbation_norm(rho: Rho, s: TangentPerturbation, a, rtol: float = 1e-8) -> float:
    """``||s||_rho^2 = <s, phi_s>``, cross-checked against ``||phi_s||_rho^2``."""
    phi = identify_potential(rho, s, a).phi
    dual = float(_project_zero_mass(rho.mesh, s.weighted(rho.mesh)) @ phi)
    Lr = _operators(rho, a).weighted_stiffness(rho.omega, rho.gamma)
    primal = float(phi @ (Lr @ phi))
    # floor for the cancellation inside L_rho @ phi when phi is nearly flat
    atol = 1e-12 * float(np.abs(phi) @ (abs(Lr) @ np.abs(phi)))
    if abs(dual - primal) > rtol * max(abs(primal), abs(dual)) + atol:
        raise RuntimeError(f"norm duality violated: <s,phi>={dual!r}, ||phi||^2={primal!r}")
    return max(primal, 0.0)


def fokker_planck_rhs(ops: OperatorSet, rho: Rho) -> TangentPerturbation:
    """``Q* rho``: interior Laplacian, boundary ``a Lap_tau gamma - d_N omega``."""
    return TangentPerturbation.from_weighted(ops.mesh, -ops.apply_stiffness(rho.values))


def log_density_potential(rho: Rho) -> Potential:
    """``D Ent = log f`` centred in ``L^2(mu)``."""
    return Potential.normalized(rho.mesh, np.log(rho.density))


def grad_entropy(
    ops: OperatorSet,
    rho: Rho,
    trace_tol: float = DEFAULT_TRACE_TOL,
    verify: bool = False,
    verify_tol: float | None = None,
) -> TangentPerturbation:
    """Otto gradient of the entropy, defined only on trace-matched states.

    With ``verify=True`` the potential of the result is compared with
    ``log f`` in the mu-weighted L2 sense; the default tolerance scales with
    the mesh width.
    """
    if np.min(rho.values) <= 0:
        raise SingularWeightError("grad_entropy needs a strictly positive density")
    mism = rho.trace_mismatch
    if mism > trace_tol:
        raise GradientUndefined(f"gradient undefined: trace mismatch {mism:.3e} exceeds {trace_tol:.3e}")
    g = -fokker_planck_rhs(ops, rho)
    if verify:
        err = potential_mismatch(ops, rho, g)
        tol = verify_tol if verify_tol is not None else potential_tolerance(ops.mesh)
        if err > tol:
            raise RuntimeError(f"potential of grad Ent deviates from log f by {err:.3e} (tol {tol:.3e})")
    return g


def potential_tolerance(mesh) -> float:
    return 2.0 * max(mesh.dr, mesh.dtheta)


def potential_mismatch(ops: OperatorSet, rho: Rho, g: TangentPerturbation) -> float:
    """Relative mu-L2 distance between ``phi_g`` and centred ``log f``."""
    phi = identify_potential(rho, g, ops).phi
    ref = log_density_potential(rho).phi
    w = rho.mesh.mu_weights
    den = np.sqrt(w @ ref**2)
    if den == 0:
        return float(np.sqrt(w @ phi**2))
    return float(np.sqrt(w @ (phi - ref) ** 2) / den)


def hamiltonian(ops: OperatorSet, rho: Rho, xi) -> float:
    """Quadratic Hamiltonian ``<Q xi, rho> + ||xi||_rho^2``."""
    phi = _phi(xi)
    drift = float(rho.masses @ ops.apply_generator(phi))
    return drift + potential_norm(rho, phi, ops)


def hamiltonian_exponential(ops: OperatorSet, rho: Rho, xi) -> float:
    """Lattice transcription ``int e^{-xi} Q e^{xi} drho`` (diagnostic only)."""
    phi = _phi(xi)
    shift = phi.max()
    e = np.exp(phi - shift)
    return float(rho.masses @ (ops.apply_generator(e) / e))


def lagrangian(ops: OperatorSet, rho: Rho, s: TangentPerturbation, trace_tol: float = DEFAULT_TRACE_TOL) -> float:
    """``1/4 ||s - Q* rho||_rho^2``, or ``inf`` when the trace condition fails."""
    if np.min(rho.values) <= 0:
        raise SingularWeightError("lagrangian needs a strictly positive density")
    if rho.trace_mismatch > trace_tol:
        return float("inf")
    return 0.25 * perturbation_norm(rho, s - fokker_planck_rhs(ops, rho), ops)


def _velocities(curve) -> list:
    times = np.asarray(curve.times, dtype=float)
    if len(times) < 2:
        raise ValueError("a curve needs at least two states")
    U = np.array([s.values for s in curve.states])
    dU = np.gradient(U, times, axis=0)
    mesh = curve.states[0].mesh
    out = []
    for row in dU:
        s = TangentPerturbation.from_vector(mesh, row)
        # remove round-off so the zero-mass guard sees an admissible tangent
        w = s.weighted(mesh)
        w -= mesh.weights * (w.sum() / mesh.weights.sum())
        out.append(TangentPerturbation.from_weighted(mesh, w))
    return out


def _trapezoid(y: np.ndarray, t: np.ndarray) -> float:
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(t)))


def action(ops: OperatorSet, curve, trace_tol: float = DEFAULT_TRACE_TOL) -> float:
    """``int_0^T L(rho_t, rho_t') dt``: trapezoid rule, central differences."""
    if any(s.trace_mismatch > trace_tol for s in curve.states):
        return float("inf")
    vel = _velocities(curve)
    lag = np.array([lagrangian(ops, r, v, trace_tol) for r, v in zip(curve.states, vel)])
    return _trapezoid(lag, np.asarray(curve.times, dtype=float))


@dataclass(frozen=True)
class EdeRecord:
    ent_drop: float  # Ent(rho_T) - Ent(rho_0), signed
    psi_integral: float
    psi_star_integral: float
    action: float
    residual: float
    relative_residual: float
    rows: tuple = ()

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EDE_COLUMNS)
        for r in self.rows:
            w.writerow([repr(float(r[k])) for k in EDE_COLUMNS])
        return buf.getvalue()


EDE_COLUMNS = ("t", "entropy", "psi", "psi_star", "lagrangian")


def ede_decomposition(ops: OperatorSet, curve, trace_tol: float = DEFAULT_TRACE_TOL) -> EdeRecord:
    """Split the action as ``1/2 [Ent_T - Ent_0 + int (Psi + Psi*)]``.

    ``Psi(rho, s) = 1/2 ||s||^2`` and ``Psi*(rho, -D Ent) = 1/2 ||log f||^2``.
    The residual is the absolute gap between the action and that split; the
    relative residual divides by ``|Ent_T - Ent_0|`` (absolute when zero).
    """
    times = np.asarray(curve.times, dtype=float)
    states = curve.states
    ent = np.array([entropy(s) for s in states])
    if any(s.trace_mismatch > trace_tol for s in states):
        inf = float("inf")
        return EdeRecord(float(ent[-1] - ent[0]), inf, inf, inf, inf, inf)
    vel = _velocities(curve)
    psi, psi_star, lag = [], [], []
    for r, v in zip(states, vel):
        if not np.any(v.values):
            psi.append(0.0)
        else:
            psi.append(0.5 * perturbation_norm(r, v, ops))
        psi_star.append(0.5 * potential_norm(r, np.log(r.density), ops))
        lag.append(lagrangian(ops, r, v, trace_tol))
    psi, psi_star, lag = map(np.array, (psi, psi_star, lag))
    ent_drop = float(ent[-1] - ent[0])
    psi_i = _trapezoid(psi, times)
    psi_s = _trapezoid(psi_star, times)
    act = _trapezoid(lag, times)
    residual = abs(act - 0.5 * (ent_drop + psi_i + psi_s))
    scale = abs(ent_drop)
    rel = residual / scale if scale > 0 else residual
    rows = tuple(
        {"t": t, "entropy": e, "psi": p, "psi_star": q, "lagrangian": l}
        for t, e, p, q, l in zip(times, ent, psi, psi_star, lag)
    )
    return EdeRecord(ent_drop, psi_i, psi_s, act, residual, rel, rows)
