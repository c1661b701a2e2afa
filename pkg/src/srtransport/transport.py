"""Discrete Kantorovich transport with the squared sub-Riemannian cost.

The LP is solved exactly by a transportation (network) simplex so that the
optimal basis yields dual potentials without smoothing. Conventions: the
dual pair satisfies ``phic_j - phi_i <= c_ij`` with equality on the contact
set, ``phic = phi^c`` (a min over ``i``) and ``phi = phic^cbar`` (a max over
``j``); potentials are normalized by ``phi_0 = 0``.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from .errors import InputError, Infeasible, NotConverged, UnstableGradient
from .geodesic import (
    Control,
    DistanceOptions,
    hamiltonian_exp,
    sr_distance,
    variational_verdict,
)
from .structure import Frame

MAX_POINTS = 256


@dataclass
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, float))
        self.weights = np.asarray(self.weights, float).ravel()
        if self.points.shape[1] != 4:
            raise InputError("measure points must lie in R^4")
        if len(self.weights) != len(self.points):
            raise InputError("one weight per point is required")
        if np.any(~np.isfinite(self.points)) or np.any(~np.isfinite(self.weights)):
            raise InputError("measure contains non-finite values")
        if np.any(self.weights <= 0):
            raise InputError("weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise InputError(f"weights sum to {self.weights.sum():.15g}, not 1")
        if len(np.unique(self.points, axis=0)) != len(self.points):
            raise InputError("measure points must be pairwise distinct")

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.atleast_2d(np.asarray(points, float))
        return cls(pts, np.full(len(pts), 1.0 / len(pts)))

    def __len__(self):
        return len(self.weights)

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "weights": self.weights.tolist()}


def parse_measure(text: str) -> DiscreteMeasure:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict) or "points" not in data:
        raise InputError("measure file needs a 'points' field")
    pts = data["points"]
    w = data.get("weights")
    try:
        if w is None:
            return DiscreteMeasure.uniform(pts)
        return DiscreteMeasure(pts, w)
    except (TypeError, ValueError) as exc:
        raise InputError(f"measure: {exc}") from None


def load_measure(path) -> DiscreteMeasure:
    with open(path, encoding="utf-8") as fh:
        return parse_measure(fh.read())


@dataclass
class Plan:
    matrix: np.ndarray
    basis: list | None = None

    def support(self, thresh: float = 1e-10) -> list:
        return [tuple(int(v) for v in ij) for ij in np.argwhere(self.matrix > thresh)]

    def triplets(self, thresh: float = 0.0) -> list:
        return [[i, j, float(self.matrix[i, j])] for i, j in np.argwhere(self.matrix > thresh)]


@dataclass
class Potentials:
    phi: np.ndarray
    phic: np.ndarray

    def dual_value(self, mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
        return float(self.phic @ nu.weights - self.phi @ mu.weights)

    def max_violation(self, C) -> float:
        return float(np.max(self.phic[None, :] - self.phi[:, None] - C))

    def shifted(self, k: float) -> "Potentials":
        return Potentials(self.phi + k, self.phic + k)


# -- cost ------------------------------------------------------------------

def cost_matrix(frame: Frame, mu: DiscreteMeasure, nu: DiscreteMeasure, opts: DistanceOptions | None = None,
                cache=None, return_controls: bool = False):
    """``c_ij = d_SR(x_i, y_j)^2`` from distance solves, retrying a failed pair once."""
    opts = opts or DistanceOptions()
    n, m = len(mu), len(nu)
    C = np.zeros((n, m))
    controls = {}
    failed = []
    for i in range(n):
        for j in range(m):
            x, y = mu.points[i], nu.points[j]
            if cache is not None and (hit := cache.get(x, y)) is not None and not return_controls:
                C[i, j] = hit[0] ** 2
                continue
            res = None
            for attempt in range(2):
                o = DistanceOptions(**{**opts.__dict__, "seed": opts.seed + 7919 * attempt})
                res = sr_distance(frame, x, y, o, raise_on_fail=False)
                if res.converged:
                    break
            if not res.converged:
                failed.append((i, j))
                continue
            C[i, j] = res.d**2
            controls[(i, j)] = res.control
            if cache is not None:
                cache.put(x, y, res.d, True)
    if failed:
        err = NotConverged(f"distance solve failed for pairs {failed}")
        err.pairs = failed
        raise err
    return (C, controls) if return_controls else C


# -- transportation simplex --------------------------------------------------

def _northwest(a, b):
    """Staircase basis of ``n + m - 1`` cells; ties advance the column."""
    n, m = len(a), len(b)
    A, B = np.cumsum(a), np.cumsum(b)
    scale = max(A[-1], B[-1])
    i = j = 0
    cells = [(0, 0)]
    while (i, j) != (n - 1, m - 1):
        if j == m - 1:
            i += 1
        elif i == n - 1:
            j += 1
        elif A[i] < B[j] - 1e-14 * scale:
            i += 1
        else:
            j += 1
        cells.append((i, j))
    return cells


def _tree_adjacency(basis, n, m):
    adj = [[] for _ in range(n + m)]
    for i, j in basis:
        adj[i].append(n + j)
        adj[n + j].append(i)
    return adj


def _tree_flows(basis, a, b):
    """Basic flows by peeling leaves off the spanning tree."""
    n, m = len(a), len(b)
    supply = np.concatenate([np.asarray(a, float), np.asarray(b, float)])
    adj = [set(nb) for nb in _tree_adjacency(basis, n, m)]
    flows = {}
    leaves = deque(v for v in range(n + m) if len(adj[v]) == 1)
    while leaves:
        v = leaves.popleft()
        if len(adj[v]) != 1:
            continue
        w = adj[v].pop()
        adj[w].discard(v)
        f = supply[v]
        cell = (v, w - n) if v < n else (w, v - n)
        flows[cell] = f
        supply[w] -= f
        if len(adj[w]) == 1:
            leaves.append(w)
    for cell in flows:
        if flows[cell] < 0:
            if flows[cell] < -1e-9:
                raise Infeasible(f"negative basic flow {flows[cell]:.3e} at {cell}")
            flows[cell] = 0.0
    return flows


def _duals(basis, C, n, m):
    u = np.full(n, np.nan)
    v = np.full(m, np.nan)
    adj = _tree_adjacency(basis, n, m)
    u[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nb in adj[node]:
            if node < n:
                j = nb - n
                if np.isnan(v[j]):
                    v[j] = C[node, j] - u[node]
                    queue.append(nb)
            else:
                i = nb
                if np.isnan(u[i]):
                    u[i] = C[i, node - n] - v[node - n]
                    queue.append(nb)
    return u, v


def _tree_path(basis, n, m, start, goal):
    """Node path from ``start`` to ``goal`` in the basis tree."""
    adj = _tree_adjacency(basis, n, m)
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb in adj[node]:
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    return path[::-1]


@dataclass
class SimplexInfo:
    iterations: int
    degenerate_pivots: int
    bland_used: bool


def transport_simplex(a, b, C, max_iter: int = 100_000):
    """Solve ``min <C, P>`` over plans with marginals ``a, b``.

    Returns ``(P, basis, u, v, info)`` where ``u_i + v_j = c_ij`` on the basis.
    Pricing is Dantzig's rule; during a run of more than 50 consecutive
    degenerate pivots Bland's rule is used until a pivot makes progress.
    """
    C = np.asarray(C, float)
    n, m = C.shape
    basis = _northwest(a, b)
    eps = 1e-12 * max(1.0, float(np.max(np.abs(C))) if C.size else 1.0)
    flows = _tree_flows(basis, a, b)
    degenerate_run = 0
    degenerate_total = 0
    bland = False
    it = 0
    for it in range(max_iter):
        u, v = _duals(basis, C, n, m)
        R = C - u[:, None] - v[None, :]
        use_bland = degenerate_run > 50
        bland = bland or use_bland
        if use_bland:
            neg = np.argwhere(R < -eps)
            if neg.size == 0:
                break
            i_in, j_in = (int(neg[0, 0]), int(neg[0, 1]))
        else:
            k = int(np.argmin(R))
            i_in, j_in = divmod(k, m)
            if R[i_in, j_in] >= -eps:
                break
        path = _tree_path(basis, n, m, i_in, n + j_in)
        # cycle: entering cell +, then alternate along the tree path
        cells = []
        for s in range(len(path) - 1):
            p, q = path[s], path[s + 1]
            cells.append((p, q - n) if p < n else (q, p - n))
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(flows[c] for c in minus)
        ties = [c for c in minus if flows[c] <= theta]
        leave = min(ties) if use_bland else ties[0]
        if theta <= 0.0:
            degenerate_run += 1
            degenerate_total += 1
        else:
            degenerate_run = 0
        basis = [c for c in basis if c != leave] + [(i_in, j_in)]
        flows = _tree_flows(basis, a, b)
    else:
        raise Infeasible("transportation simplex hit the iteration limit")
    P = np.zeros((n, m))
    for (i, j), f in flows.items():
        P[i, j] = f
    u, v = _duals(basis, C, n, m)
    return P, basis, u, v, SimplexInfo(it, degenerate_total, bland)


def solve_kantorovich(mu: DiscreteMeasure, nu: DiscreteMeasure, C) -> tuple:
    """Optimal plan and cost of the discrete transport problem."""
    C = np.asarray(C, float)
    n, m = len(mu), len(nu)
    if n > MAX_POINTS or m > MAX_POINTS:
        raise InputError(f"desk-scale solver accepts at most {MAX_POINTS} points per side (got {n}x{m})")
    if C.shape != (n, m):
        raise InputError(f"cost matrix has shape {C.shape}, expected {(n, m)}")
    if not np.all(np.isfinite(C)):
        raise InputError("cost matrix contains non-finite entries")
    P, basis, u, v, _ = transport_simplex(mu.weights, nu.weights, C)
    plan = Plan(P, basis)
    plan._duals = (u, v)
    return plan, float(np.sum(P * C))


def dual_potentials(mu: DiscreteMeasure, nu: DiscreteMeasure, C, plan: Plan) -> Potentials:
    """Dual pair from the optimal basis, shifted so that ``phi_0 = 0``."""
    C = np.asarray(C, float)
    duals = getattr(plan, "_duals", None)
    if plan.basis is None or duals is None:
        # any optimal dual certifies every optimal plan, so re-solving is safe
        plan2, _ = solve_kantorovich(mu, nu, C)
        duals = plan2._duals
    u, v = duals
    phi, phic = -u, v.copy()
    shift = phi[0]
    return Potentials(phi - shift, phic - shift)


def c_transform(phi, C) -> np.ndarray:
    """``phic_j = min_i (phi_i + c_ij)``."""
    return np.min(np.asarray(phi)[:, None] + np.asarray(C), axis=0)


def c_bar_transform(phic, C) -> np.ndarray:
    """``phi_i = max_j (phic_j - c_ij)``."""
    return np.max(np.asarray(phic)[None, :] - np.asarray(C), axis=1)


# -- contact set and classification --------------------------------------------

STRICT_TOL = 1e-7
LOOSE_TOL = 2e-2


@dataclass
class ContactSet:
    pairs: list
    targets: dict
    tol: float
    loose: bool = False

    def __contains__(self, ij):
        return tuple(ij) in self._set

    @property
    def _set(self):
        return set(self.pairs)

    def covers(self, plan: Plan, thresh: float = 1e-10) -> bool:
        s = self._set
        return all(c in s for c in plan.support(thresh))


def contact_set(pot: Potentials, C, tol: float | None = None, loose: bool = False) -> ContactSet:
    """Pairs with ``phic_j - phi_i = c_ij`` up to ``tol (1 + |c_ij|)``."""
    C = np.asarray(C, float)
    tol = tol if tol is not None else (LOOSE_TOL if loose else STRICT_TOL)
    gap = C - (pot.phic[None, :] - pot.phi[:, None])
    hit = np.abs(gap) <= tol * (1.0 + np.abs(C))
    pairs = [tuple(int(v) for v in ij) for ij in np.argwhere(hit)]
    targets = {i: [j for (a, j) in pairs if a == i] for i in range(C.shape[0])}
    return ContactSet(pairs, targets, tol, loose)


def _self_index(mu: DiscreteMeasure, nu: DiscreteMeasure) -> dict:
    out = {}
    for i, x in enumerate(mu.points):
        hit = np.flatnonzero(np.all(nu.points == x, axis=1))
        if hit.size:
            out[i] = int(hit[0])
    return out


def static_status(mu: DiscreteMeasure, nu: DiscreteMeasure, gamma: ContactSet) -> list:
    """``"static"`` for source points whose copy in ``nu`` is a contact target, else ``"moving"``."""
    selfidx = _self_index(mu, nu)
    out = []
    for i in range(len(mu)):
        j = selfidx.get(i)
        out.append("static" if j is not None and (i, j) in gamma else "moving")
    return out


@dataclass
class Classification:
    status: list  # "static" | "moving" per mu point
    tags: dict = field(default_factory=dict)  # (i, j) -> "regular" | "singular" | "unclassified"
    details: dict = field(default_factory=dict)

    @property
    def static(self) -> list:
        return [i for i, s in enumerate(self.status) if s == "static"]

    @property
    def moving(self) -> list:
        return [i for i, s in enumerate(self.status) if s == "moving"]


def classify(frame: Frame, mu: DiscreteMeasure, nu: DiscreteMeasure, gamma: ContactSet,
             opts: DistanceOptions | None = None, trials: int = 10, seed: int = 0,
             rank_tol: float = 1e-6, controls: dict | None = None) -> Classification:
    """Static/moving status per source point and a regular/singular tag per moving pair.

    A point is static iff its exact copy in ``nu`` is one of its contact
    targets. Each contact pair between distinct points gets the variational
    rank verdict of a recovered minimizing control; pairs whose distance solve
    fails are tagged ``"unclassified"``.
    """
    opts = opts or DistanceOptions()
    status = static_status(mu, nu, gamma)
    tags, details = {}, {}
    for i, j in gamma.pairs:
        if np.array_equal(mu.points[i], nu.points[j]):
            continue
        u = (controls or {}).get((i, j))
        if u is None:
            res = sr_distance(frame, mu.points[i], nu.points[j], opts, raise_on_fail=False)
            if not res.converged:
                tags[(i, j)] = "unclassified"
                continue
            u = res.control
        try:
            verdict = variational_verdict(frame, mu.points[i], u, trials, seed, rank_tol)
        except Exception as exc:  # leaving the box while probing
            tags[(i, j)] = "unclassified"
            details[(i, j)] = str(exc)
            continue
        tags[(i, j)] = "singular" if verdict.singular else "regular"
        details[(i, j)] = {"ranks": verdict.ranks, "min_sv": min(verdict.min_singular_values)}
    return Classification(status, tags, details)


@dataclass
class StaticReport:
    ok: bool
    deficits: dict


def static_fixed_check(cls: Classification, plan: Plan, mu: DiscreteMeasure, nu: DiscreteMeasure,
                       tol: float = 1e-9) -> StaticReport:
    """Every static point keeps its full mass: ``alpha_ii' >= w_i - tol``."""
    selfidx = _self_index(mu, nu)
    deficits = {}
    for i in cls.static:
        d = mu.weights[i] - plan.matrix[i, selfidx[i]]
        if d > tol:
            deficits[i] = float(d)
    return StaticReport(not deficits, deficits)


# -- support functions ---------------------------------------------------------

def ball_grid(x, radius: float, h: float) -> np.ndarray:
    """Points of the ``h``-lattice through ``x`` inside the closed ball, ``x`` excluded."""
    k = int(math.floor(radius / h + 1e-9))
    axis = np.arange(-k, k + 1) * h
    mesh = np.meshgrid(axis, axis, axis, axis, indexing="ij")
    d = np.stack([m.ravel() for m in mesh], axis=1)
    r = np.linalg.norm(d, axis=1)
    keep = (r <= radius + 1e-12) & (r > 0)
    return np.asarray(x, float) + d[keep]


def least_distance_support(x, fx, Z, fZ, sigma: float):
    """Minimum-norm ``p`` with ``f(x) <= f(z) - <p, x - z> + sigma |x - z|^2`` for all ``z``.

    The constraints read ``G p >= g`` with rows ``G = z - x`` and
    ``g = f(x) - f(z) - sigma |z - x|^2``. The least-distance problem is
    solved through its non-negative least-squares dual; returns ``None`` when infeasible.
    """
    D = np.asarray(Z, float) - np.asarray(x, float)
    g = fx - np.asarray(fZ, float) - sigma * np.sum(D * D, axis=1)
    E = np.vstack([D.T, g[None, :]])
    f = np.zeros(E.shape[0])
    f[-1] = 1.0
    # bounded-variable LS; scipy's nnls misreports convergence on these systems
    w = lsq_linear(E, f, bounds=(0.0, np.inf), method="bvls", tol=1e-14).x
    r = E @ w - f
    if abs(r[-1]) < 1e-12:
        return None
    p = -r[:-1] / r[-1]
    slack = D @ p - g
    if slack.min() < -1e-9 * (1.0 + np.abs(g).max()):
        return None
    return p


def _table(f, x, radius, h):
    if callable(f):
        Z = ball_grid(x, radius, h)
        return float(f(np.asarray(x, float))), Z, np.array([f(z) for z in Z])
    fx, Z, fZ = f
    return float(fx), np.asarray(Z, float), np.asarray(fZ, float)


def wk_membership(phi, x, k: int, h: float | None = None) -> tuple:
    """``x`` has a support ``|p| <= k`` with ``phi(x) <= phi(z) - <p, x - z> + k |x - z|^2`` on ``B(x, 1/k)``.

    ``phi`` is a callable or a table ``(phi(x), Z, phi(Z))``. Returns
    ``(ok, p)`` with ``p`` the minimum-norm support slope (``None`` if none).
    """
    radius = 1.0 / k
    h = h or radius / 4
    fx, Z, fZ = _table(phi, x, radius, h)
    p = least_distance_support(x, fx, Z, fZ, float(k))
    if p is None:
        return False, None
    return bool(np.linalg.norm(p) <= k * (1 + 1e-12)), p


def semiconvex_support_test(f, x, sigma: float, radius: float = 0.1, h: float = 0.05) -> tuple:
    """``(ok, p)``: does ``f(x) <= f(z) - <p, x - z> + sigma |x - z|^2`` hold on the grid ball?"""
    fx, Z, fZ = _table(f, x, radius, h)
    p = least_distance_support(x, fx, Z, fZ, float(sigma))
    return p is not None, p


# -- maps from potentials --------------------------------------------------------

class PotentialInterpolant:
    """``phi~(z) = max_j (phic_j - d_SR(z, y_j)^2)``, extending the dual potential off the support.

    Distance solves to each target are warm-started from the control found
    at the last evaluation point.
    """

    def __init__(self, frame: Frame, nu: DiscreteMeasure, phic, opts: DistanceOptions | None = None):
        self.frame = frame
        self.nu = nu
        self.phic = np.asarray(phic, float)
        self.opts = opts or DistanceOptions()
        self._warm: dict = {}
        self._fast = DistanceOptions(**{**self.opts.__dict__, "starts": 1})

    def values(self, z) -> np.ndarray:
        out = np.empty(len(self.nu))
        for j, y in enumerate(self.nu.points):
            u0 = self._warm.get(j)
            opts = self._fast if u0 is not None else self.opts
            res = sr_distance(self.frame, z, y, opts, u0=u0, raise_on_fail=False)
            if not res.converged and u0 is not None:
                res = sr_distance(self.frame, z, y, self.opts)
            self._warm[j] = res.control
            out[j] = self.phic[j] - res.d**2
        return out

    def __call__(self, z) -> float:
        return float(np.max(self.values(np.asarray(z, float))))


class ConstantPotential:
    def __init__(self, value: float = 0.0):
        self.value = value

    def __call__(self, z) -> float:
        return self.value


def stable_gradient(fun, x, h: float = 1e-3, rtol: float = 1e-2, atol: float = 1e-6) -> np.ndarray:
    """Central-difference gradient, rejected if halving ``h`` moves it too much."""
    from ._numerics import central_gradient

    g1 = central_gradient(fun, x, h)
    g2 = central_gradient(fun, x, h / 2)
    if np.linalg.norm(g1 - g2) > atol + rtol * np.linalg.norm(g2):
        raise UnstableGradient(f"gradient moved by {np.linalg.norm(g1 - g2):.3e} under step halving")
    return g2


def map_from_potential(frame: Frame, phi_tilde, x, h: float = 1e-3, t: float = 1.0) -> np.ndarray:
    """Transport map candidate ``y = exp_x(grad phi~(x) / 2)``.

    With ``phic - phi <= d^2`` tight along the optimal pairing, ``phi~`` is
    touched from below by ``phic_j - d^2(., y_j)`` at ``x``, so its
    differential is ``2 exp_x^{-1}(y_j)`` for the Hamiltonian
    ``H = |p|^2 / 2``. ``t`` scales the covector to follow the geodesic.
    """
    x = np.asarray(x, float)
    g = stable_gradient(phi_tilde, x, h)
    return hamiltonian_exp(frame, x, 0.5 * t * g, 1.0)


# -- reports -----------------------------------------------------------------

def transport_report(plan: Plan, cost: float, pot: Potentials, mu, nu, C, gamma: ContactSet,
                     gamma_loose: ContactSet | None = None, cls: Classification | None = None) -> dict:
    gap = cost - pot.dual_value(mu, nu)
    rep = {
        "optimal_cost": cost,
        "duality_gap": gap,
        "plan": plan.triplets(1e-15),
        "potentials": {"phi": pot.phi.tolist(), "phic": pot.phic.tolist()},
        "dual_violation": pot.max_violation(C),
        "contact_pairs": [list(p) for p in gamma.pairs],
        "contact_tol": gamma.tol,
        "support_in_contact": gamma.covers(plan),
    }
    if gamma_loose is not None:
        rep["contact_pairs_loose"] = [list(p) for p in gamma_loose.pairs]
        rep["support_in_contact_loose"] = gamma_loose.covers(plan)
    if cls is not None:
        rep["classification"] = {
            "status": cls.status,
            "tags": [[i, j, t] for (i, j), t in sorted(cls.tags.items())],
        }
    return rep
