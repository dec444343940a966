"""Entropic optimal transport and the JKO minimizing-movement scheme.

Measures on a mesh are handled as node masses (point masses at the node
positions).  The JKO step

    rho_n in argmin_rho  W^2(rho, rho_{n-1}) / (2h) + Ent_mu(rho)

is solved over transport plans with a fixed first marginal.  Multiplying by
``2h`` and adding an entropic penalty gives

    <C, pi> + eps H(pi) + 2h KL(pi^T 1 | m),

whose dual scaling iterations have closed-form updates for both marginals
(the second one is the proximal map of the entropy).
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import xlogy

from .dynamics import step_count
from .mesh import DiskMesh
from .metric import CostMatrix
from .rho import Rho

log = logging.getLogger(__name__)

EXACT_OT_MAX = 64
JKO_COLUMNS = ("n", "t", "entropy", "transport_cost", "objective", "boundary_mass")


class TransportError(RuntimeError):
    """Scaling iterations did not reach the requested tolerance."""


def logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    """Stable log-sum-exp along one axis (lean version for small dense arrays)."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _cost_array(C) -> np.ndarray:
    return C.C if isinstance(C, CostMatrix) else np.asarray(C, dtype=float)


def _median_offdiag(C: np.ndarray) -> float:
    n, m = C.shape
    vals = C[C > 0] if n != m else C[~np.eye(n, dtype=bool)]
    vals = vals[vals > 0]
    return float(np.median(vals)) if vals.size else 1.0


def epsilon_schedule(C: np.ndarray, epsilon: float, factor: float = 0.5) -> np.ndarray:
    """Geometric decrease from ``median(C)`` down to ``epsilon``."""
    start = max(_median_offdiag(C), epsilon)
    k = max(0, int(math.ceil(math.log(start / epsilon) / math.log(1.0 / factor))))
    return np.geomspace(start, epsilon, k + 1)


# ---------------------------------------------------------------------------
# balanced entropic transport


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    cost_value: float
    plan: np.ndarray
    marginal_error: float
    iterations: int
    epsilon: float


NEWTON_AFTER = 2000


def _sinkhorn_sweeps(la, lb, Cs, f, g, eps, n_iter, target):
    """Alternating log-domain updates; stops early once the row marginal is within ``target``."""
    pa = np.exp(la)
    err = np.inf
    used = 0
    for used in range(1, n_iter + 1):
        f = eps * la - eps * logsumexp((g[None, :] - Cs) / eps, axis=1)
        g = eps * lb - eps * logsumexp((f[:, None] - Cs) / eps, axis=0)
        if used % 10 == 0 or used == n_iter:
            P = np.exp((f[:, None] + g[None, :] - Cs) / eps)
            err = 0.5 * np.abs(P.sum(axis=1) - pa).sum()
            if err <= target:
                break
    return f, g, err, used


def _newton_polish(la, lb, Cs, g, eps, target, max_steps=200):
    """Damped Newton ascent on the semi-dual ``g -> <b, g> + <a, f(g)>``.

    ``f(g)`` enforces the row marginal exactly; each step solves the column
    marginal equation with a Levenberg-Marquardt shift of the Jacobian, whose
    conditioning degrades as ``eps`` shrinks.
    """
    a, b = np.exp(la), np.exp(lb)

    def state(g):
        f = eps * la - eps * logsumexp((g[None, :] - Cs) / eps, axis=1)
        P = np.exp((f[:, None] + g[None, :] - Cs) / eps)
        return f, P, float(b @ g + a @ f)

    f, P, phi = state(g)
    c = P.sum(axis=0)
    err = 0.5 * np.abs(c - b).sum()
    mu = 1e-6
    for _ in range(max_steps):
        if err <= target or mu > 1e12:
            break
        J = (np.diag(c) - P.T @ (P / a[:, None])) / eps
        scale = np.diag(J).max()
        step = np.linalg.solve(J + mu * scale * np.eye(len(g)), b - c)
        f2, P2, phi2 = state(g + step)
        if phi2 > phi:
            g, f, P, phi = g + step, f2, P2, phi2
            c = P.sum(axis=0)
            err = 0.5 * np.abs(c - b).sum()
            mu = max(mu / 4, 1e-16)
        else:
            mu *= 8
    return f, g, err


def sinkhorn(mu0, mu1, C, epsilon: float, max_iter: int = 100000, tol: float = 1e-6) -> SinkhornResult:
    """Log-domain Sinkhorn with epsilon scaling.

    Returns the transport cost ``<plan, C>`` of the entropic plan (not the
    regularized objective).  Raises :class:`TransportError` if the marginals
    are still off by more than ``tol`` in total variation.
    """
    a = np.asarray(mu0, dtype=float)
    b = np.asarray(mu1, dtype=float)
    C = _cost_array(C)
    if C.shape != (a.size, b.size):
        raise ValueError("cost matrix shape does not match the marginals")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("marginals must be nonnegative")
    if not math.isclose(a.sum(), b.sum(), rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"marginals have different mass: {a.sum()!r} vs {b.sum()!r}")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    ia, ib = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    pa, pb = a[ia], b[ib]
    Cs = C[np.ix_(ia, ib)]
    la, lb = np.log(pa), np.log(pb)
    f = np.zeros(ia.size)
    g = np.zeros(ib.size)
    it = 0
    err = np.inf
    schedule = epsilon_schedule(Cs, epsilon)
    for k, eps in enumerate(schedule):
        last = k == len(schedule) - 1
        budget = max(50, max_iter // (4 * len(schedule)))
        if last:
            budget = max(1, max_iter - it)
        target = tol if last else 10 * tol
        newton_tried = False
        while budget > 0:
            chunk = min(budget, NEWTON_AFTER) if (last and not newton_tried) else budget
            f, g, err, used = _sinkhorn_sweeps(la, lb, Cs, f, g, eps, chunk, target)
            it += used
            budget -= used
            if err <= target or not last:
                break
            if not newton_tried:
                newton_tried = True
                f, g, err = _newton_polish(la, lb, Cs, g, eps, target)
                if err <= target:
                    break
    P = np.exp((f[:, None] + g[None, :] - Cs) / schedule[-1])
    err = 0.5 * (np.abs(P.sum(axis=1) - pa).sum() + np.abs(P.sum(axis=0) - pb).sum())
    if err > tol:
        raise TransportError(f"sinkhorn did not converge in {max_iter} iterations: marginal violation {err:.3e} > {tol:.1e}")
    plan = np.zeros(C.shape)
    plan[np.ix_(ia, ib)] = P
    return SinkhornResult(float(np.sum(P * Cs)), plan, float(err), it, float(schedule[-1]))


def exact_ot_small(mu0, mu1, C) -> float:
    """Exact optimal transport cost by linear programming (test oracle)."""
    a = np.asarray(mu0, dtype=float)
    b = np.asarray(mu1, dtype=float)
    C = _cost_array(C)
    n, m = a.size, b.size
    if n > EXACT_OT_MAX or m > EXACT_OT_MAX:
        raise ValueError(f"exact_ot_small supports at most {EXACT_OT_MAX} points per side")
    if C.shape != (n, m):
        raise ValueError("cost matrix shape does not match the marginals")
    rows = np.zeros((n + m, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        rows[n + j, j::m] = 1.0
    res = linprog(C.ravel(), A_eq=rows, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"linear program failed: {res.message}")
    return float(res.fun)


# ---------------------------------------------------------------------------
# mesh transfer


def _interval_overlap(lo1, hi1, lo2, hi2):
    return np.clip(np.minimum(hi1, hi2) - np.maximum(lo1, lo2), 0.0, None)


def _angular_overlap(n_from: int, n_to: int) -> np.ndarray:
    """Fraction of each source sector lying in each target sector."""
    d1, d2 = 2 * np.pi / n_from, 2 * np.pi / n_to
    c1 = np.arange(n_from) * d1
    c2 = np.arange(n_to) * d2
    out = np.zeros((n_from, n_to))
    for shift in (-2 * np.pi, 0.0, 2 * np.pi):
        out += _interval_overlap(
            (c1 - d1 / 2)[:, None], (c1 + d1 / 2)[:, None],
            (c2 - d2 / 2 + shift)[None, :], (c2 + d2 / 2 + shift)[None, :],
        )
    return out / d1


def _radial_overlap(n_from: int, n_to: int) -> np.ndarray:
    """Fraction of each source annulus area lying in each target annulus."""
    e1 = np.arange(n_from + 1) / n_from
    e2 = np.arange(n_to + 1) / n_to
    lo = np.maximum(e1[:-1, None], e2[None, :-1])
    hi = np.minimum(e1[1:, None], e2[None, 1:])
    area = np.where(hi > lo, hi**2 - lo**2, 0.0)
    return area / (e1[1:] ** 2 - e1[:-1] ** 2)[:, None]


def aggregation_matrix(fine: DiskMesh, coarse: DiskMesh) -> np.ndarray:
    """Mass transfer ``T`` with ``coarse_masses = fine_masses @ T`` (rows sum to 1)."""
    ang = _angular_overlap(fine.n_theta, coarse.n_theta)
    rad = _radial_overlap(fine.n_r, coarse.n_r)
    T = np.zeros((fine.node_count, coarse.node_count))
    T[: fine.n_interior, : coarse.n_interior] = np.kron(rad, ang)
    T[fine.n_interior:, coarse.n_interior:] = ang
    return T


def aggregate(rho: Rho, coarse: DiskMesh) -> Rho:
    """Conservative transfer of ``rho`` onto a coarser mesh."""
    if rho.mesh is coarse:
        return rho
    masses = rho.masses @ aggregation_matrix(rho.mesh, coarse)
    return Rho.from_masses(coarse, masses, rho.probability)


# ---------------------------------------------------------------------------
# JKO


@dataclass(frozen=True)
class JkoConfig:
    h: float
    epsilon: float
    cost: CostMatrix
    max_iter: int = 20000
    tol: float = 1e-8

    def __post_init__(self):
        if not (self.h > 0 and self.epsilon > 0 and self.tol > 0):
            raise ValueError("h, epsilon and tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


def relative_entropy_masses(q: np.ndarray, m: np.ndarray) -> float:
    """``sum q log(q/m)`` for node masses ``q`` against reference masses ``m``."""
    return float(np.sum(xlogy(q, q) - xlogy(q, m)))


@dataclass(frozen=True, eq=False)
class JkoStepResult:
    rho: Rho
    transport_cost: float
    objective: float
    objective_prev: float
    iterations: int
    marginal_error: float
    stayed: bool = False


def jko_step_detailed(rho_prev: Rho, cfg: JkoConfig, mesh: DiskMesh | None = None) -> JkoStepResult:
    """Entropic JKO step with a final comparison against staying put.

    The candidate's objective uses the cost of the entropic plan, an upper
    bound for ``W^2``; if even that bound does not beat ``Ent(rho_prev)`` the
    step returns ``rho_prev`` (zero transport), so descent holds exactly.
    """
    mesh = rho_prev.mesh if mesh is None else mesh
    C = _cost_array(cfg.cost)
    n = mesh.node_count
    if C.shape != (n, n):
        raise ValueError("cost matrix must cover all mesh nodes")
    if not rho_prev.probability:
        raise ValueError("rho_prev must be a probability measure")
    p = rho_prev.masses
    if np.any(p < 0):
        raise ValueError("rho_prev must be nonnegative")
    m = mesh.mu_weights
    lam = 2.0 * cfg.h
    ent_prev = relative_entropy_masses(p, m)

    ip = np.flatnonzero(p > 0)
    Cs = C[ip]
    lp, lm = np.log(p[ip]), np.log(m)
    f = np.zeros(ip.size)
    g = np.zeros(n)
    it = 0
    schedule = epsilon_schedule(C, cfg.epsilon)
    err = np.inf
    for k, eps in enumerate(schedule):
        last = k == len(schedule) - 1
        budget = cfg.max_iter if last else max(50, cfg.max_iter // (4 * len(schedule)))
        kappa = lam / (lam + eps)
        target = cfg.tol if last else 10 * cfg.tol
        for _ in range(budget):
            f = eps * lp - eps * logsumexp((g[None, :] - Cs) / eps, axis=1)
            g = kappa * (eps * lm - eps * logsumexp((f[:, None] - Cs) / eps, axis=0))
            it += 1
            if it % 10 == 0:
                P = np.exp((f[:, None] + g[None, :] - Cs) / eps)
                err = 0.5 * np.abs(P.sum(axis=1) - p[ip]).sum()
                if err <= target:
                    break
        P = np.exp((f[:, None] + g[None, :] - Cs) / eps)
        err = 0.5 * np.abs(P.sum(axis=1) - p[ip]).sum()
    if not np.isfinite(err) or err > cfg.tol:
        raise TransportError(f"JKO scaling did not converge: marginal violation {err:.3e} after {it} iterations")
    q = P.sum(axis=0)
    q *= p.sum() / q.sum()
    cost = float(np.sum(P * Cs))
    obj = cost / lam + relative_entropy_masses(q, m)
    if not obj < ent_prev:
        return JkoStepResult(rho_prev, 0.0, ent_prev, ent_prev, it, float(err), stayed=True)
    rho = Rho.from_masses(mesh, q, True)
    return JkoStepResult(rho, cost, float(obj), ent_prev, it, float(err))


def jko_step(rho_prev: Rho, cfg: JkoConfig, mesh: DiskMesh | None = None) -> Rho:
    """One minimizing-movement step (see :func:`jko_step_detailed`)."""
    return jko_step_detailed(rho_prev, cfg, mesh).rho


def jko_step_reference(p: np.ndarray, C: np.ndarray, m: np.ndarray, h: float) -> tuple:
    """Unregularized JKO step by direct convex minimization over plans.

    Small instances only (``n <= 8``); used to cross-check the scaling solver.
    Returns ``(q, objective)``.
    """
    from scipy.optimize import minimize

    p, C, m = (np.asarray(v, dtype=float) for v in (p, C, m))
    n = p.size
    if n > 8:
        raise ValueError("reference JKO solver is limited to 8 nodes")
    lam = 2.0 * h

    def obj(x):
        P = x.reshape(n, n)
        q = P.sum(axis=0)
        return float(np.sum(P * C) / lam + np.sum(xlogy(q, q) - xlogy(q, m)))

    def grad(x):
        P = x.reshape(n, n)
        q = np.maximum(P.sum(axis=0), 1e-300)
        return (C / lam + (np.log(q / m) + 1.0)[None, :]).ravel()

    A = np.zeros((n, n * n))
    for i in range(n):
        A[i, i * n:(i + 1) * n] = 1.0
    x0 = np.diag(p).ravel()
    res = minimize(
        obj, x0, jac=grad, method="SLSQP",
        bounds=[(0, None)] * (n * n),
        constraints=[{"type": "eq", "fun": lambda x: A @ x - p, "jac": lambda x: A}],
        options={"ftol": 1e-14, "maxiter": 2000},
    )
    P = np.clip(res.x.reshape(n, n), 0, None)
    return P.sum(axis=0), float(res.fun)


@dataclass(frozen=True, eq=False)
class JkoTrajectory:
    h: float
    times: np.ndarray
    states: list
    objectives: np.ndarray
    transport_costs: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def entropies(self) -> np.ndarray:
        if "ent" not in self._cache:
            self._cache["ent"] = np.array(
                [relative_entropy_masses(s.masses, s.mesh.mu_weights) for s in self.states]
            )
        return self._cache["ent"]

    @property
    def boundary_masses(self) -> np.ndarray:
        return np.array([s.boundary_mass for s in self.states])

    def state_at(self, t: float) -> Rho:
        """Piecewise-constant interpolant: ``rho_n`` on ``((n-1)h, nh]``."""
        n = 0 if t <= 0 else step_count(t, self.h)
        return self.states[min(n, len(self.states) - 1)]

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(JKO_COLUMNS)
        ent = self.entropies
        for k, (t, s) in enumerate(zip(self.times, self.states)):
            w.writerow([k, repr(float(t)), repr(float(ent[k])), repr(float(self.transport_costs[k])),
                        repr(float(self.objectives[k])), repr(s.boundary_mass)])
        return buf.getvalue()


def jko_flow(rho0: Rho, cfg: JkoConfig, T: float, mesh: DiskMesh | None = None) -> JkoTrajectory:
    """Iterate :func:`jko_step` ``ceil(T/h)`` times."""
    if not T >= cfg.h:
        raise ValueError(f"need T >= h, got T={T!r}, h={cfg.h!r}")
    mesh = rho0.mesh if mesh is None else mesh
    n = step_count(T, cfg.h)
    states = [rho0]
    ent0 = relative_entropy_masses(rho0.masses, mesh.mu_weights)
    objectives, costs = [ent0], [0.0]
    rho = rho0
    for k in range(n):
        res = jko_step_detailed(rho, cfg, mesh)
        rho = res.rho
        states.append(rho)
        objectives.append(res.objective)
        costs.append(res.transport_cost)
    return JkoTrajectory(cfg.h, cfg.h * np.arange(n + 1), states, np.array(objectives), np.array(costs))
