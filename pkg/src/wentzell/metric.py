"""Refraction distance on the closed unit disk.

Paths are charged their Euclidean length in the interior and ``1/sqrt(a)``
per unit arc length along the boundary circle.  Below ``a = 1`` the boundary
weight is clamped to 1 (lower semicontinuous envelope), so ``d_a`` is the
Euclidean distance for every ``a <= 1``.  The overall normalization is
chosen so that ``d_1`` is exactly the Euclidean distance.

Two independent routes compute the same quantity:

* a wide-stencil Dijkstra on a square grid clipped to the disk, with a ring
  of boundary nodes joined by arc edges;
* an exact optimizer over the disk-specific family
  ``chord | chord -> arc -> chord``, parametrized by entry and exit angles.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from math import gcd

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .mesh import DiskMesh, OperatorSet

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 256
INTERIOR = "interior"
BOUNDARY = "boundary"
DISK_TOL = 1e-12


def boundary_weight(a: float) -> float:
    """Cost per unit boundary arc length, ``1/sqrt(max(a, 1))``."""
    if not a > 0:
        raise ValueError(f"a must be positive, got {a!r}")
    return 1.0 / math.sqrt(max(a, 1.0))


def _check_point(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(2)
    if np.hypot(*p) > 1.0 + DISK_TOL:
        raise ValueError(f"point {tuple(p)} lies outside the closed unit disk")
    return p


def _wrap(d):
    return (np.asarray(d) + np.pi) % (2 * np.pi) - np.pi


def _on_circle(phi):
    return np.stack([np.cos(phi), np.sin(phi)], axis=-1)


# ---------------------------------------------------------------------------
# exact chord/arc optimizer


@dataclass(frozen=True)
class _Route:
    length: float
    phi1: float | None  # entry angle, None for a pure chord
    phi2: float | None
    converged: bool = True


def _route_length(x, y, phi1, phi2, w):
    p1 = _on_circle(phi1)
    p2 = _on_circle(phi2)
    return (
        np.linalg.norm(p1 - x, axis=-1)
        + w * np.abs(_wrap(np.asarray(phi2) - np.asarray(phi1)))
        + np.linalg.norm(p2 - y, axis=-1)
    )


def _optimal_route(a: float, x: np.ndarray, y: np.ndarray, n_grid: int = 360) -> _Route:
    chord = float(np.linalg.norm(x - y))
    w = boundary_weight(a)
    if w >= 1.0:
        return _Route(chord, None, None)
    phi = np.linspace(-np.pi, np.pi, n_grid, endpoint=False)
    # always offer the angles of the endpoints themselves
    phi = np.concatenate([phi, [math.atan2(x[1], x[0]), math.atan2(y[1], y[0])]])
    g1 = np.linalg.norm(_on_circle(phi) - x, axis=-1)
    g2 = np.linalg.norm(_on_circle(phi) - y, axis=-1)
    total = g1[:, None] + w * np.abs(_wrap(phi[None, :] - phi[:, None])) + g2[None, :]
    k = np.unravel_index(np.argmin(total), total.shape)
    start = np.array([phi[k[0]], phi[k[1]]])
    res = minimize(
        lambda v: float(_route_length(x, y, v[0], v[1], w)),
        start,
        method="Nelder-Mead",
        options={"xatol": 1e-11, "fatol": 1e-14, "maxiter": 4000},
    )
    best, v = float(total[k]), start
    if res.fun < best:
        best, v = float(res.fun), res.x
    converged = bool(res.success)
    if best < chord:
        return _Route(best, float(v[0]), float(v[1]), converged)
    return _Route(chord, None, None, converged)


def exact_distance(a: float, x, y) -> float:
    """``d_a(x, y)`` from the chord/arc family (exact for the disk)."""
    x, y = _check_point(x), _check_point(y)
    return _optimal_route(a, x, y).length


# ---------------------------------------------------------------------------
# geodesic paths


@dataclass(frozen=True, eq=False)
class GeodesicPath:
    points: np.ndarray
    tags: tuple
    a: float
    weighted_length: float
    converged: bool = True

    def segment_lengths(self) -> np.ndarray:
        """Weighted length of every segment (arcs charged by angle)."""
        p = self.points
        out = np.empty(len(self.tags))
        w = boundary_weight(self.a)
        for k, tag in enumerate(self.tags):
            if tag == BOUNDARY:
                c = np.clip(p[k] @ p[k + 1] / (np.linalg.norm(p[k]) * np.linalg.norm(p[k + 1])), -1.0, 1.0)
                out[k] = w * math.acos(c)
            else:
                out[k] = np.linalg.norm(p[k + 1] - p[k])
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "a": self.a,
                "points": self.points.tolist(),
                "tags": list(self.tags),
                "weighted_length": self.weighted_length,
                "converged": self.converged,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GeodesicPath":
        d = json.loads(text)
        return cls(np.array(d["points"]), tuple(d["tags"]), d["a"], d["weighted_length"], d["converged"])


def _assemble_path(a, pts, tags, converged=True) -> GeodesicPath:
    pts = np.asarray(pts, dtype=float)
    path = GeodesicPath(pts, tuple(tags), float(a), 0.0, converged)
    return GeodesicPath(pts, tuple(tags), float(a), float(path.segment_lengths().sum()), converged)


def geodesic_disk(a: float, x, y, arc_samples: int = 64, resolution: int = 128) -> GeodesicPath:
    """Minimizing curve from ``x`` to ``y`` for the weight ``1/sqrt(a)``.

    For ``a < 1`` this is the straight chord.  If the angle optimizer does not
    converge, the graph route is returned instead with ``converged=False``.
    """
    x, y = _check_point(x), _check_point(y)
    route = _optimal_route(a, x, y)
    if not route.converged:
        warnings.warn("chord/arc optimizer did not converge; falling back to the graph route", RuntimeWarning)
        return _graph_path(a, x, y, resolution)
    if route.phi1 is None:
        return _assemble_path(a, [x, y], [INTERIOR])
    p1, p2 = _on_circle(route.phi1), _on_circle(route.phi2)
    pts, tags = [x], []
    if np.linalg.norm(p1 - x) > 1e-12:
        pts.append(p1)
        tags.append(INTERIOR)
    else:
        pts[0] = p1
    delta = float(_wrap(route.phi2 - route.phi1))
    n_arc = max(1, int(math.ceil(arc_samples * abs(delta) / np.pi)))
    if abs(delta) > 0:
        for k in range(1, n_arc + 1):
            pts.append(_on_circle(route.phi1 + delta * k / n_arc))
            tags.append(BOUNDARY)
    if np.linalg.norm(p2 - y) > 1e-12:
        pts.append(y)
        tags.append(INTERIOR)
    if not tags:
        return _assemble_path(a, [x, y], [INTERIOR])
    return _assemble_path(a, pts, tags)


def snell_angle(path: GeodesicPath) -> float | None:
    """Angle (degrees) between the incoming chord and the outward normal at
    the first interior-to-boundary transition; ``None`` without one."""
    for k in range(len(path.tags) - 1):
        if path.tags[k] == INTERIOR and path.tags[k + 1] == BOUNDARY:
            p = path.points[k + 1]
            d = p - path.points[k]
            c = float(d @ p / (np.linalg.norm(d) * np.linalg.norm(p)))
            return math.degrees(math.acos(min(1.0, max(-1.0, c))))
    return None


def path_action(path: GeodesicPath, n_steps: int = 2000) -> float:
    """Riemann sum of the weighted squared speed along the constant-speed
    reparametrization of ``path`` over unit time."""
    seg = path.segment_lengths()
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0:
        return 0.0
    s = np.linspace(0.0, total, n_steps + 1)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = np.where(seg[k] > 0, (s - cum[k]) / np.where(seg[k] > 0, seg[k], 1.0), 0.0)
    P = np.empty((len(s), 2))
    for idx in range(len(s)):
        kk = k[idx]
        p0, p1 = path.points[kk], path.points[kk + 1]
        if path.tags[kk] == BOUNDARY:
            t0, t1 = math.atan2(p0[1], p0[0]), math.atan2(p1[1], p1[0])
            P[idx] = _on_circle(t0 + _wrap(t1 - t0) * frac[idx])
        else:
            P[idx] = p0 + (p1 - p0) * frac[idx]
    dt = 1.0 / n_steps
    dX = np.diff(P, axis=0)
    mid = k[:-1] if n_steps > 0 else k
    weight = np.array([boundary_weight(path.a) ** 2 if path.tags[m] == BOUNDARY else 1.0 for m in mid])
    return float(np.sum(weight * np.sum(dX**2, axis=1)) / dt)


# ---------------------------------------------------------------------------
# wide-stencil graph route


def stencil_offsets(max_offset: int = 5) -> list:
    """Primitive offsets ``(p, q)`` with ``|p|, |q|`` bounded, kept if they
    refine the angular coverage: ``(1,k)`` for ``k <= max_offset`` and ``(2,3)``."""
    base = [(1, 0), (1, 1), (2, 3)] + [(1, k) for k in range(2, max_offset + 1)]
    out = set()
    for p, q in base:
        if gcd(p, q) != 1:
            continue
        for sp_, sq in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            out.add((sp_ * p, sq * q))
            out.add((sq * q, sp_ * p))
    return sorted(out)


@dataclass(frozen=True, eq=False)
class DiskGraph:
    resolution: int
    a_eff: float
    points: np.ndarray
    is_ring: np.ndarray
    ring_angle: np.ndarray  # nan for grid nodes
    matrix: sp.csr_matrix
    tree: cKDTree = field(repr=False)
    h: float = 0.0


@lru_cache(maxsize=8)
def disk_graph(a_eff: float, resolution: int = DEFAULT_RESOLUTION) -> DiskGraph:
    """Grid nodes strictly inside the disk, ring nodes on the circle."""
    if resolution < 4:
        raise ValueError("resolution must be >= 4")
    h = 2.0 / resolution
    ax = -1.0 + h * np.arange(resolution + 1)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    inside = X**2 + Y**2 < (1.0 - 1e-9) ** 2
    gid = -np.ones(X.shape, dtype=np.int64)
    gid[inside] = np.arange(inside.sum())
    grid_pts = np.column_stack([X[inside], Y[inside]])
    n_grid = len(grid_pts)

    rows, cols, vals = [], [], []
    I, J = np.nonzero(inside)
    for p, q in stencil_offsets():
        if (p, q) < (0, 0):
            continue  # each undirected edge once
        I2, J2 = I + p, J + q
        ok = (I2 >= 0) & (I2 <= resolution) & (J2 >= 0) & (J2 <= resolution)
        ok[ok] &= inside[I2[ok], J2[ok]]
        rows.append(gid[I[ok], J[ok]])
        cols.append(gid[I2[ok], J2[ok]])
        vals.append(np.full(ok.sum(), h * math.hypot(p, q)))

    n_ring = int(math.ceil(2 * np.pi / h))
    ang = 2 * np.pi * np.arange(n_ring) / n_ring
    ring_pts = _on_circle(ang)
    ring_ids = n_grid + np.arange(n_ring)
    w = boundary_weight(a_eff)
    rows.append(ring_ids)
    cols.append(n_grid + (np.arange(n_ring) + 1) % n_ring)
    vals.append(np.full(n_ring, w * 2 * np.pi / n_ring))

    tree_grid = cKDTree(grid_pts)
    link = 2.5 * h
    for r, nbrs in enumerate(tree_grid.query_ball_point(ring_pts, link)):
        nbrs = np.asarray(nbrs, dtype=np.int64)
        rows.append(np.full(len(nbrs), ring_ids[r]))
        cols.append(nbrs)
        vals.append(np.linalg.norm(grid_pts[nbrs] - ring_pts[r], axis=1))

    pts = np.vstack([grid_pts, ring_pts])
    n = len(pts)
    r_, c_, v_ = map(np.concatenate, (rows, cols, vals))
    M = sp.coo_matrix((v_, (r_, c_)), shape=(n, n)).tocsr()
    M = M.maximum(M.T).tocsr()
    is_ring = np.zeros(n, dtype=bool)
    is_ring[n_grid:] = True
    ring_angle = np.full(n, np.nan)
    ring_angle[n_grid:] = ang
    return DiskGraph(resolution, a_eff, pts, is_ring, ring_angle, M, cKDTree(pts), h)


def _augment(g: DiskGraph, queries: np.ndarray):
    """Append query points as extra nodes linked to their neighbourhood."""
    n = g.matrix.shape[0]
    m = len(queries)
    w = boundary_weight(g.a_eff)
    rows, cols, vals = [], [], []
    link = 2.5 * g.h
    n_ring = int(g.is_ring.sum())
    for q, pt in enumerate(queries):
        nbrs = np.asarray(g.tree.query_ball_point(pt, link), dtype=np.int64)
        d = np.linalg.norm(g.points[nbrs] - pt, axis=1)
        rows.append(np.full(len(nbrs), n + q))
        cols.append(nbrs)
        vals.append(np.maximum(d, 1e-300))
        if np.hypot(*pt) >= 1.0 - 1e-12:
            # boundary query: arc edges to the two bracketing ring nodes
            th = math.atan2(pt[1], pt[0]) % (2 * np.pi)
            k0 = int(math.floor(th / (2 * np.pi) * n_ring)) % n_ring
            for k in (k0, (k0 + 1) % n_ring):
                node = n - n_ring + k
                arc = abs(float(_wrap(g.ring_angle[node] - th)))
                rows.append(np.array([n + q]))
                cols.append(np.array([node]))
                vals.append(np.array([max(w * arc, 1e-300)]))
    r_, c_, v_ = map(np.concatenate, (rows, cols, vals))
    E = sp.coo_matrix((v_, (r_, c_)), shape=(n + m, n + m)).tocsr()
    big = sp.bmat([[g.matrix, None], [None, sp.csr_matrix((m, m))]]).tocsr()
    A = big.maximum(E).maximum(E.T)
    return A.tocsr(), n


def graph_distances(a: float, sources, targets, resolution: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Dijkstra distances between two point lists (matrix ``len(sources) x len(targets)``)."""
    S = np.atleast_2d(np.asarray(sources, dtype=float))
    T = np.atleast_2d(np.asarray(targets, dtype=float))
    for p in np.vstack([S, T]):
        _check_point(p)
    g = disk_graph(max(float(a), 1.0), int(resolution))
    A, n = _augment(g, np.vstack([S, T]))
    D = dijkstra(A, directed=False, indices=n + np.arange(len(S)))
    out = D[:, n + len(S) + np.arange(len(T))]
    same = np.all(np.abs(S[:, None, :] - T[None, :, :]) == 0, axis=2)
    out[same] = 0.0
    return out


def _graph_path(a, x, y, resolution) -> GeodesicPath:
    g = disk_graph(max(float(a), 1.0), int(resolution))
    A, n = _augment(g, np.vstack([x, y]))
    _, pred = dijkstra(A, directed=False, indices=n, return_predecessors=True)
    node = n + 1
    chain = [node]
    while pred[node] >= 0:
        node = pred[node]
        chain.append(node)
    chain = chain[::-1]
    pts_all = np.vstack([g.points, x, y])
    ring = np.concatenate([g.is_ring, [np.hypot(*x) >= 1 - 1e-12, np.hypot(*y) >= 1 - 1e-12]])
    pts = pts_all[chain]
    tags = [BOUNDARY if ring[u] and ring[v] else INTERIOR for u, v in zip(chain[:-1], chain[1:])]
    return _assemble_path(a, pts, tags, converged=False)


# ---------------------------------------------------------------------------
# public distance API


def point_distance(a: float, x, y, resolution: int = DEFAULT_RESOLUTION, method: str = "auto") -> float:
    """``d_a(x, y)``.

    ``method="auto"`` runs the graph route and refines it with the exact
    chord/arc optimizer (keeping the smaller feasible length);
    ``"graph"`` and ``"exact"`` return a single route.
    """
    x, y = _check_point(x), _check_point(y)
    if not a > 0:
        raise ValueError(f"a must be positive, got {a!r}")
    if np.array_equal(x, y):
        return 0.0
    if method == "exact":
        return exact_distance(a, x, y)
    if method not in ("auto", "graph"):
        raise ValueError(f"unknown method {method!r}")
    d_graph = float(graph_distances(a, x, y, resolution)[0, 0])
    if method == "graph":
        return d_graph
    return min(d_graph, exact_distance(a, x, y))


def _node_points(mesh: DiskMesh, nodes) -> np.ndarray:
    idx = np.unique(np.asarray(nodes, dtype=int).ravel())
    if idx.size == 0:
        raise ValueError("node set must be nonempty")
    return mesh.points[idx]


def set_distance(a: float, A, B, mesh: DiskMesh) -> float:
    """``min_{x in A, y in B} d_a(x, y)`` over node sets of ``mesh``."""
    PA, PB = _node_points(mesh, A), _node_points(mesh, B)
    if set(np.asarray(A).ravel().tolist()) & set(np.asarray(B).ravel().tolist()):
        return 0.0
    if boundary_weight(a) >= 1.0:
        return float(np.min(np.linalg.norm(PA[:, None, :] - PB[None, :, :], axis=2)))
    return min(exact_distance(a, x, y) for x in PA for y in PB)


def lipschitz_graph(ops: OperatorSet, radius: float | None = None) -> sp.csr_matrix:
    """Constraint graph of the discrete 1-Lipschitz potentials.

    Every pair of mesh nodes closer than ``radius`` carries the bound
    ``|f_i - f_j| <= |x_i - x_j|``.  Pairs of boundary nodes are bounded by
    ``min(chord, arc / sqrt(a))``: the interior gradient bound already
    controls the trace by the chord, the boundary energy by ``arc/sqrt(a)``.
    """
    mesh = ops.mesh
    if radius is None:
        radius = 3.0 * max(mesh.dr, mesh.dtheta)
    pts = mesh.points
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    i, j = pairs[:, 0], pairs[:, 1]
    length = np.linalg.norm(pts[i] - pts[j], axis=1)
    nb = mesh.n_interior
    both = (i >= nb) & (j >= nb)
    arc = np.abs(_wrap(mesh.theta[i[both]] - mesh.theta[j[both]]))
    length[both] = np.minimum(length[both], arc / math.sqrt(ops.a))
    # the mesh edges themselves are always constraints
    ei, ej = mesh.edge_i, mesh.edge_j
    el = np.linalg.norm(pts[ei] - pts[ej], axis=1)
    bnd = (ei >= nb) & (ej >= nb)
    el[bnd] = np.minimum(el[bnd], mesh.dtheta / math.sqrt(ops.a))
    u = np.concatenate([i, ei])
    v = np.concatenate([j, ej])
    lo, hi = np.minimum(u, v), np.maximum(u, v)
    length = np.concatenate([length, el])
    n = mesh.node_count
    # keep the smallest bound for pairs listed twice
    order = np.lexsort((length, hi, lo))
    lo, hi, length = lo[order], hi[order], length[order]
    first = np.ones(len(lo), dtype=bool)
    first[1:] = (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])
    G = sp.coo_matrix((length[first], (lo[first], hi[first])), shape=(n, n)).tocsr()
    if connected_components(G, directed=False)[0] != 1:
        raise RuntimeError("Lipschitz constraint graph is disconnected")
    return G


def intrinsic_set_distance(ops: OperatorSet, A, B, radius: float | None = None) -> float:
    """``sup { min_B f - max_A f : f discrete 1-Lipschitz }``.

    Evaluated through its dual, the shortest-path distance from ``A`` to ``B``
    in :func:`lipschitz_graph`.
    """
    A = np.unique(np.asarray(A, dtype=int).ravel())
    B = np.unique(np.asarray(B, dtype=int).ravel())
    if A.size == 0 or B.size == 0:
        raise ValueError("node sets must be nonempty")
    if np.intersect1d(A, B).size:
        return 0.0
    G = lipschitz_graph(ops, radius)
    D = dijkstra(G, directed=False, indices=A, min_only=True)
    return float(D[B].min())


def intrinsic_set_distance_lp(ops: OperatorSet, A, B, radius: float | None = None) -> float:
    """Primal linear program for :func:`intrinsic_set_distance` (small meshes)."""
    from scipy.optimize import linprog

    A = np.unique(np.asarray(A, dtype=int).ravel())
    B = np.unique(np.asarray(B, dtype=int).ravel())
    if np.intersect1d(A, B).size:
        return 0.0
    G = sp.triu(lipschitz_graph(ops, radius)).tocoo()
    n = ops.mesh.node_count
    # variables: f (n), t_A, t_B ; maximize t_B - t_A
    nv = n + 2
    rows = []
    rhs = []
    for u, v, L in zip(G.row, G.col, G.data):
        r = np.zeros(nv)
        r[u], r[v] = 1.0, -1.0
        rows.append(r)
        rhs.append(L)
        rows.append(-r)
        rhs.append(L)
    for u in A:
        r = np.zeros(nv)
        r[u], r[n] = 1.0, -1.0  # f_u <= t_A
        rows.append(r)
        rhs.append(0.0)
    for v in B:
        r = np.zeros(nv)
        r[v], r[n + 1] = -1.0, 1.0  # t_B <= f_v
        rows.append(r)
        rhs.append(0.0)
    c = np.zeros(nv)
    c[n], c[n + 1] = 1.0, -1.0
    bounds = [(None, None)] * nv
    bounds[A[0]] = (0.0, 0.0)  # remove the additive constant
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"linear program failed: {res.message}")
    return float(-res.fun)


# ---------------------------------------------------------------------------
# cost matrices


@dataclass(frozen=True, eq=False)
class CostMatrix:
    nodes: np.ndarray
    C: np.ndarray
    a: float
    resolution: int

    @property
    def n(self) -> int:
        return len(self.nodes)

    def median(self) -> float:
        off = self.C[~np.eye(self.n, dtype=bool)]
        return float(np.median(off))

    def save(self, path: str) -> None:
        """Row-major float64 binary plus a JSON sidecar ``<path>.json``."""
        np.ascontiguousarray(self.C, dtype="<f8").tofile(path)
        with open(path + ".json", "w") as fh:
            json.dump({"n": self.n, "a": self.a, "resolution": self.resolution}, fh, sort_keys=True)

    @classmethod
    def load(cls, path: str, nodes=None) -> "CostMatrix":
        with open(path + ".json") as fh:
            meta = json.load(fh)
        C = np.fromfile(path, dtype="<f8").reshape(meta["n"], meta["n"])
        return cls(np.asarray(nodes) if nodes is not None else np.empty((meta["n"], 2)), C, meta["a"], meta["resolution"])


def cost_matrix(a: float, nodes, resolution: int = DEFAULT_RESOLUTION, use_graph: bool = True) -> CostMatrix:
    """Squared distances ``d_a(x_i, x_j)^2`` between all pairs of ``nodes``.

    ``nodes`` is a point array or a :class:`DiskMesh`.  Graph distances come
    from one Dijkstra per source on the shared grid; each entry is then
    refined by the exact route.
    """
    pts = nodes.points if isinstance(nodes, DiskMesh) else np.asarray(nodes, dtype=float)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least two nodes")
    w = boundary_weight(a)
    diff = pts[:, None, :] - pts[None, :, :]
    exact = np.linalg.norm(diff, axis=2)
    if w < 1.0:
        for i in range(n):
            for j in range(i + 1, n):
                exact[i, j] = exact[j, i] = _optimal_route(a, pts[i], pts[j]).length
    D = exact
    if use_graph:
        G = graph_distances(a, pts, pts, resolution)
        D = np.minimum(G, exact)
    D = np.minimum(D, D.T)
    np.fill_diagonal(D, 0.0)
    return CostMatrix(pts.copy(), D**2, float(a), int(resolution))
