"""Implicit-Euler time stepping of the Wentzell heat flow.

The evolved quantity is the mu-density ``f = d rho / d mu``; one step solves

    (W + dt L) f' = W f,

which is ``f' = (I - dt Q)^{-1} f`` for the generator ``Q = -W^{-1} L``.  The
trace coupling between interior and boundary densities is never imposed: it
emerges through the normal-coupling edges.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import OperatorSet
from .otto import entropy
from .rho import Rho

DEFAULT_DT = 1e-4
CG_RTOL = 1e-12


class SolverError(RuntimeError):
    """Linear solve failed to reach the requested residual."""


class ImplicitEuler:
    """Reusable implicit-Euler stepper for a fixed ``(ops, dt)`` pair.

    ``method="cg"`` runs Jacobi-preconditioned conjugate gradients;
    ``method="direct"`` factorizes once with SuperLU, which pays off for long
    runs and for the tiny tail values of the short-time experiments (the
    factors of an M-matrix keep all substitutions sign-definite).
    """

    def __init__(self, ops: OperatorSet, dt: float, method: str = "cg", rtol: float = CG_RTOL):
        if not dt > 0:
            raise ValueError(f"time step must be positive, got {dt!r}")
        if method not in ("cg", "direct"):
            raise ValueError(f"unknown linear solver {method!r}")
        self.ops = ops
        self.dt = float(dt)
        self.method = method
        self.rtol = rtol
        W = ops.weights
        self._w = W
        self._A = (sp.diags(W) + self.dt * ops.L).tocsc()
        if method == "direct":
            self._lu = spla.splu(self._A)
        else:
            self._precond = sp.diags(1.0 / self._A.diagonal())

    def step(self, f: np.ndarray) -> np.ndarray:
        b = self._w * f
        if self.method == "direct":
            return self._lu.solve(b)
        x, info = spla.cg(self._A, b, x0=f, rtol=self.rtol, atol=0.0, M=self._precond, maxiter=10 * len(b))
        res = np.linalg.norm(b - self._A @ x)
        if info != 0 or res > 10 * self.rtol * np.linalg.norm(b):
            raise SolverError(
                f"conjugate gradients did not converge (info={info}, residual={res:.3e}, "
                f"|b|={np.linalg.norm(b):.3e})"
            )
        return x


def heat_step(ops: OperatorSet, rho: Rho, dt: float = DEFAULT_DT, method: str = "cg") -> Rho:
    """Advance ``rho`` by one implicit-Euler step of length ``dt``."""
    if not np.isfinite(rho.mass):
        raise ValueError("rho must have finite mass")
    f = ImplicitEuler(ops, dt, method).step(rho.density)
    return Rho.from_density(ops.mesh, f, rho.probability)


@dataclass(frozen=True, eq=False)
class HeatTrajectory:
    times: np.ndarray
    states: list
    a: float
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.states)

    @property
    def masses(self) -> np.ndarray:
        return np.array([s.mass for s in self.states])

    @property
    def entropies(self) -> np.ndarray:
        if "ent" not in self._cache:
            self._cache["ent"] = np.array([entropy(s) for s in self.states])
        return self._cache["ent"]

    @property
    def boundary_masses(self) -> np.ndarray:
        return np.array([s.boundary_mass for s in self.states])

    def reversed(self) -> "HeatTrajectory":
        """The same states traversed backwards on the same time grid."""
        return HeatTrajectory(self.times.copy(), self.states[::-1], self.a)

    def rows(self):
        ent = self.entropies
        for t, s, e in zip(self.times, self.states, ent):
            yield {
                "t": float(t),
                "mass": s.mass,
                "entropy": float(e),
                "boundary_mass": s.boundary_mass,
                "trace_mismatch": s.trace_mismatch,
            }

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEAT_COLUMNS)
        for row in self.rows():
            w.writerow([_fmt(row[k]) for k in HEAT_COLUMNS])
        return buf.getvalue()


HEAT_COLUMNS = ("t", "mass", "entropy", "boundary_mass", "trace_mismatch")


def _fmt(x: float) -> str:
    return repr(float(x))


def step_count(T: float, dt: float) -> int:
    """``ceil(T/dt)`` robust to round-off in the ratio."""
    ratio = T / dt
    n = round(ratio)
    if abs(ratio - n) <= 1e-9 * max(1.0, ratio):
        return int(n)
    return int(math.ceil(ratio))


def solve_heat(
    ops: OperatorSet,
    rho0: Rho,
    T: float,
    dt: float = DEFAULT_DT,
    method: str = "cg",
    stride: int = 1,
) -> HeatTrajectory:
    """Run ``ceil(T/dt)`` implicit-Euler steps; keep every ``stride``-th state."""
    if not (T >= dt > 0):
        raise ValueError(f"need T >= dt > 0, got T={T!r}, dt={dt!r}")
    n = step_count(T, dt)
    stepper = ImplicitEuler(ops, dt, method)
    f = rho0.density
    times, states = [0.0], [rho0]
    for k in range(1, n + 1):
        f = stepper.step(f)
        if k % stride == 0 or k == n:
            times.append(k * dt)
            states.append(Rho.from_density(ops.mesh, f, rho0.probability))
    return HeatTrajectory(np.array(times), states, ops.a)


def _node_set(nodes, n: int) -> np.ndarray:
    idx = np.unique(np.asarray(nodes, dtype=int).ravel())
    if idx.size == 0:
        raise ValueError("node set must be nonempty")
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError("node index out of range")
    return idx


def evolve_indicator(ops: OperatorSet, B, t: float, dt: float, method: str = "direct") -> np.ndarray:
    """``P_t 1_B`` on the mesh; the step is shrunk so that it lands on ``t``."""
    n_nodes = ops.mesh.node_count
    B = _node_set(B, n_nodes)
    f = np.zeros(n_nodes)
    f[B] = 1.0
    if t == 0:
        return f
    if t < 0:
        raise ValueError("t must be nonnegative")
    n = max(1, step_count(t, dt))
    stepper = ImplicitEuler(ops, t / n, method)
    for _ in range(n):
        f = stepper.step(f)
    return f


def transition_mass(ops: OperatorSet, A, B, t: float, dt: float = DEFAULT_DT, method: str = "direct") -> float:
    """``P_t(A, B) = int_A P_t 1_B dmu`` for node sets ``A`` and ``B``."""
    A = _node_set(A, ops.mesh.node_count)
    f = evolve_indicator(ops, B, t, dt, method)
    return float(ops.M[A] @ f[A])


def _tilted(A: sp.spmatrix, s: np.ndarray, kappa: float) -> sp.csc_matrix:
    """``diag(e^{kappa s}) A diag(e^{-kappa s})`` assembled entrywise."""
    C = A.tocoo()
    vals = C.data * np.exp(kappa * (s[C.row] - s[C.col]))
    return sp.csc_matrix((vals, (C.row, C.col)), shape=A.shape)


def log_transition_mass(
    ops: OperatorSet,
    A,
    B,
    t: float,
    n_steps: int = 1000,
    max_tries: int = 12,
) -> float:
    """``log P_t(A, B)`` for transition masses far below the double range.

    The implicit-Euler system is conjugated by the exponential tilt
    ``e^{kappa s}``, ``s`` the coordinate along the direction from ``B`` to
    ``A``.  The conjugated matrix keeps the M-matrix sign pattern, so its
    triangular solves involve no cancellation and the tilted iterate carries
    full relative accuracy; ``kappa`` is adapted until that iterate neither
    underflows on ``A`` nor overflows anywhere.
    """
    mesh = ops.mesh
    A = _node_set(A, mesh.node_count)
    B = _node_set(B, mesh.node_count)
    if not t > 0:
        raise ValueError("t must be positive")
    pts = mesh.points
    e = pts[A].mean(axis=0) - pts[B].mean(axis=0)
    norm = np.linalg.norm(e)
    if norm == 0:
        raise ValueError("sets A and B must have distinct centroids")
    e /= norm
    s = pts @ e
    s -= s[B].min()
    gap = max(float(s[A].min()), 0.0)
    dt = t / n_steps
    W = ops.weights
    Amat = (sp.diags(W) + dt * ops.L).tocsc()
    # keep every entry ratio of the tilted matrix within e^40
    coo = Amat.tocoo()
    jump = float(np.max(np.abs(s[coo.row] - s[coo.col])))
    kappa_max = 40.0 / jump if jump > 0 else 0.0
    # Gaussian guess: balances g(B) ~ g(A) ~ 1
    kappa = min(gap / (8.0 * t), kappa_max) if gap > 0 else 0.0
    for _ in range(max_tries):
        try:
            lu = spla.splu(_tilted(Amat, s, kappa), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0)
        except RuntimeError:
            kappa *= 0.5
            continue
        g = np.zeros(mesh.node_count)
        g[B] = np.exp(kappa * s[B])
        ok = True
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            for _ in range(n_steps):
                g = lu.solve(W * g)
                if not np.all(np.isfinite(g)) or g.max() > 1e250:
                    ok = False
                    break
        if not ok:
            kappa *= 0.5
            continue
        gA = g[A]
        if np.any(gA <= 1e-250):
            if kappa >= kappa_max:
                break
            kappa = min(1.5 * kappa + 1.0, kappa_max)
            continue
        logs = np.log(ops.M[A]) + np.log(gA) - kappa * s[A]
        m = logs.max()
        return float(m + np.log(np.exp(logs - m).sum()))
    raise SolverError("could not find an exponential tilt keeping the iterate in range")
