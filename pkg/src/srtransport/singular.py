"""The singular line field of a rank-2 frame, its flow and adjoint certificates.

For ``X1 = d1``, ``X2 = d2 + A d3 + B d4`` with ``A_1 = dA/dx1`` nonvanishing,
the horizontal field

    X = alpha1 X1 + alpha2 X2,
    alpha1 = E B_1 - F A_1,    alpha2 = B_11 A_1 - A_11 B_1,

spans the directions of singular curves wherever the brackets up to order
three span R^4, and vanishes exactly on the degenerate set. A covector
certificate along any integral curve is

    p = (0, A B_1 / A_1 - B, -B_1 / A_1, 1).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ._numerics import rk4
from .errors import CertificateFailed, ChartDegenerate, LeftDomain
from .structure import (
    Frame,
    Poly4,
    PolyBundle,
    VectorField4,
    ef_coefficients,
    growth_check,
)

CHART_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class SingularField:
    frame: Frame
    alpha1: Poly4
    alpha2: Poly4
    X: VectorField4
    divX: Poly4

    @cached_property
    def bundle(self) -> PolyBundle:
        """Joint evaluator for ``[X_1..X_4, div X, alpha1, alpha2]``."""
        return PolyBundle([*self.X.components, self.divX, self.alpha1, self.alpha2])

    @cached_property
    def closed_form_parts(self) -> PolyBundle:
        """``[alpha1, alpha2, E, A_1, A_11, div X2]`` for the closed-form divergence."""
        E, _ = ef_coefficients(self.frame)
        A = self.frame.A
        return PolyBundle([self.alpha1, self.alpha2, E, A.d(1), A.d(1, 1), A.d(3) + self.frame.B.d(4)])

    @cached_property
    def C_bound(self) -> float:
        return divergence_bound(self)

    def is_identically_zero(self) -> bool:
        return self.X.is_zero()

    def evaluate(self, x):
        """``(X, div X, |X|_g)`` at points ``(..., 4)``."""
        v = self.bundle(x)
        return v[..., :4], v[..., 4], np.hypot(v[..., 5], v[..., 6])

    def controls(self, x):
        """``(alpha1, alpha2)`` at points: the control realizing ``X``."""
        v = self.bundle(x)
        return v[..., 5:7]

    def norm_g(self, x):
        u = self.controls(x)
        return np.hypot(u[..., 0], u[..., 1])


def line_field(frame: Frame, check: bool = True) -> SingularField:
    """Assemble the singular field ``X`` of ``frame`` by exact term arithmetic."""
    if check:
        growth_check(frame).require(chart=True)
    A, B = frame.A, frame.B
    E, F = ef_coefficients(frame)
    A1, B1 = A.d(1), B.d(1)
    alpha1 = E * B1 - F * A1
    alpha2 = B.d(1, 1) * A1 - A.d(1, 1) * B1
    X = frame.X1.scaled(alpha1) + frame.X2.scaled(alpha2)
    return SingularField(frame, alpha1, alpha2, X, X.divergence())


@dataclass(frozen=True)
class DivergenceValue:
    direct: float
    closed_form: float

    @property
    def rel_error(self) -> float:
        return abs(self.direct - self.closed_form) / max(1.0, abs(self.direct))

    @property
    def agree(self) -> bool:
        return self.rel_error <= 1e-9


def divergence_closed_form(sf: SingularField, x) -> np.ndarray:
    """``2 alpha2 (E/A_1 + div X2) + 2 alpha1 A_11/A_1`` at points ``(..., 4)``."""
    v = sf.closed_form_parts(x)
    a1, a2, E, A1, A11, divX2 = (v[..., k] for k in range(6))
    if np.any(np.abs(A1) <= CHART_EPS):
        bad = np.asarray(x, float).reshape(-1, 4)[np.argmax(np.abs(np.ravel(A1)) <= CHART_EPS)]
        raise ChartDegenerate(f"A_x1 vanishes at {tuple(bad)}", point=tuple(bad))
    return 2.0 * a2 * (E / A1 + divX2) + 2.0 * a1 * A11 / A1


def divergence(sf: SingularField, x) -> DivergenceValue:
    """Polynomial divergence of ``X`` at ``x`` together with the closed form."""
    x = np.asarray(x, float)
    closed = float(divergence_closed_form(sf, x))
    return DivergenceValue(float(sf.divX(x)), closed)


@dataclass(frozen=True)
class DivergenceBoundReport:
    C: float
    c1: float
    c2: float
    min_margin: float
    audit_points: int

    @property
    def ok(self) -> bool:
        return self.min_margin >= -1e-12


# |div X| <= 2 (|alpha1| c1 + |alpha2| c2) <= 2 sqrt(2) max(c1, c2) |X|_g
_NORM_FACTOR = 2.0 * math.sqrt(2.0)


def divergence_bound_report(sf: SingularField, n: int = 17, audit: int = 10_000,
                            seed: int = 0, safety: float = 1.1) -> DivergenceBoundReport:
    """Constant ``C`` with ``div X >= -C |X|_g`` on the box, plus its audit."""
    box = sf.frame.box
    rng = np.random.default_rng(seed)
    audit_pts = box.sample(rng, audit)
    pts = np.concatenate([box.grid(n), audit_pts])
    v = sf.closed_form_parts(pts)
    A1 = v[:, 3]
    if np.any(np.abs(A1) <= CHART_EPS):
        bad = tuple(pts[np.argmax(np.abs(A1) <= CHART_EPS)])
        raise ChartDegenerate(f"A_x1 vanishes at {bad}", point=bad)
    c1 = float(np.max(np.abs(v[:, 4] / A1)))
    c2 = float(np.max(np.abs(v[:, 2] / A1 + v[:, 5])))
    C = safety * _NORM_FACTOR * max(c1, c2)
    _, div, nrm = sf.evaluate(audit_pts)
    margin = float(np.min(div + C * nrm)) if audit else 0.0
    return DivergenceBoundReport(C, c1, c2, margin, audit)


def divergence_bound(sf: SingularField, **kw) -> float:
    return divergence_bound_report(sf, **kw).C


# -- flows -----------------------------------------------------------------

@dataclass
class FlowPath:
    times: np.ndarray
    points: np.ndarray
    sign: int = 1
    controls: np.ndarray | None = None
    truncated: bool = False
    exit_time: float | None = None

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]


def auto_steps(sf: SingularField, T: float, target: float = 0.1) -> int:
    """Smallest step count with ``h * max|DX| <= target`` (coefficient bound)."""
    lip = math.sqrt(sum(c.gradient_bound(sf.frame.box) ** 2 for c in sf.X))
    return max(1, int(math.ceil(abs(T) * lip / target)))


def flow(sf: SingularField, x0, sign: int = 1, T: float = 1.0, steps: int | None = None,
         on_exit: str = "raise") -> FlowPath:
    """RK4 trajectory of ``x' = sign * X(x)`` on ``[0, T]``.

    ``on_exit`` is ``"raise"`` (LeftDomain), ``"truncate"`` (flagged path up
    to the last node inside the box) or ``"ignore"``.
    """
    if sign not in (-1, 1):
        raise ValueError("sign must be +1 or -1")
    x0 = np.asarray(x0, float)
    steps = steps or auto_steps(sf, T)
    box = sf.frame.box
    X = sf.X
    s = float(sign)

    def rhs(t, y):
        return s * X(y)

    exit_info = {}

    def stop(k, t, y):
        if on_exit != "ignore" and not box.contains(y, atol=1e-9):
            exit_info["t"] = t
            exit_info["y"] = y
            return True
        return False

    pts = rk4(rhs, x0, T, steps, record=True, callback=stop)
    h = T / steps
    truncated = bool(exit_info)
    if truncated:
        if on_exit == "raise":
            raise LeftDomain(f"flow left the box at t={exit_info['t']:.6g}", exit_info["t"], tuple(exit_info["y"]))
        pts = pts[:-1]
    times = h * np.arange(len(pts))
    controls = s * sf.controls(pts)
    return FlowPath(times, pts, sign, controls, truncated, exit_info.get("t"))


@dataclass
class BatchFlow:
    """Endpoints of a vectorized flow with optional co-integrated quantities."""

    end: np.ndarray
    J: np.ndarray | None = None
    length: np.ndarray | None = None
    inside: np.ndarray | None = None
    history: list = field(default_factory=list)


def flow_points(sf: SingularField, X0, sign: int = 1, T: float = 1.0, steps: int | None = None,
                jacobian: bool = False, length: bool = False, record_every: int = 0) -> BatchFlow:
    """Flow many points at once; optionally integrate ``J' = div X J`` and ``l' = |X|_g``.

    The augmented state is ``(x, J, l)``; RK4 handles all rows together. With
    ``record_every = k`` the state after every ``k`` steps is kept in
    ``history`` as ``(t, x, J, l)``.
    """
    X0 = np.atleast_2d(np.asarray(X0, float))
    steps = steps or auto_steps(sf, T)
    s = float(sign)
    n = X0.shape[0]
    bundle = sf.bundle

    def rhs(t, y):
        v = bundle(y[:, :4])
        out = np.empty_like(y)
        out[:, :4] = s * v[:, :4]
        out[:, 4] = s * v[:, 4] * y[:, 4]
        out[:, 5] = np.hypot(v[:, 5], v[:, 6])
        return out

    y = np.empty((n, 6))
    y[:, :4] = X0
    y[:, 4] = 1.0
    y[:, 5] = 0.0
    hist = []
    h = T / steps

    def cb(k, t, yk):
        if record_every and k % record_every == 0:
            hist.append((t, yk[:, :4].copy(), yk[:, 4].copy(), yk[:, 5].copy()))
        return False

    if record_every:
        hist.append((0.0, y[:, :4].copy(), y[:, 4].copy(), y[:, 5].copy()))
    y = rk4(rhs, y, T, steps, callback=cb if record_every else None)
    inside = sf.frame.box.contains(y[:, :4], atol=1e-9)
    return BatchFlow(
        end=y[:, :4],
        J=y[:, 4] if jacobian else None,
        length=y[:, 5] if length else None,
        inside=inside,
        history=hist,
    )


def horizontal_path(frame: Frame, times, points) -> FlowPath:
    """Wrap a sampled horizontal curve, reading its control off the velocity.

    Since ``X1 = e1`` and ``X2 = e2 + ...``, the control is ``(x1', x2')``;
    the velocity is taken by second-order finite differences.
    """
    times = np.asarray(times, float)
    points = np.asarray(points, float)
    vel = np.gradient(points, times, axis=0, edge_order=2)
    return FlowPath(times, points, 1, vel[:, :2].copy())


# -- certificates ----------------------------------------------------------

@dataclass
class AdjointPath:
    times: np.ndarray
    p: np.ndarray


def _chart_values(frame: Frame, pts):
    """``[A, B, grad A, grad B, grad A_1, grad B_1]`` evaluated on points."""
    A, B = frame.A, frame.B
    A1, B1 = A.d(1), B.d(1)
    bundle = PolyBundle([A, B, *A.gradient(), *B.gradient(), *A1.gradient(), *B1.gradient()])
    return bundle(pts)


def adjoint_certificate(frame: Frame, path: FlowPath) -> AdjointPath:
    """``p = (0, A B_1/A_1 - B, -B_1/A_1, 1)`` at each node of ``path``."""
    v = _chart_values(frame, path.points)
    A, B, A1, B1 = v[:, 0], v[:, 1], v[:, 2], v[:, 6]
    bad = np.abs(A1) <= CHART_EPS
    if bad.any():
        k = int(np.argmax(bad))
        raise ChartDegenerate(f"A_x1 vanishes at node {k}", point=tuple(path.points[k]))
    p = np.zeros((len(path.points), 4))
    p[:, 2] = -B1 / A1
    p[:, 1] = -A * p[:, 2] - B
    p[:, 3] = 1.0
    return AdjointPath(path.times.copy(), p)


@dataclass
class SingularityReport:
    residuals: dict
    worst_node: dict
    fd_adjoint: float
    tol: float

    @property
    def ok(self) -> bool:
        return all(v <= self.tol for v in self.residuals.values())

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values())


def certificate_residuals(frame: Frame, points, controls, p) -> dict:
    """Pointwise residual arrays of the adjoint conditions.

    ``X1``, ``X2``, ``bracket``: ``p`` annihilates X1, X2 and [X1, X2].
    ``order3``: ``u1 p.[X1,[X1,X2]] + u2 p.[X2,[X1,X2]]``.
    ``adjoint``: ``p' + sum u_i p.DX^i`` with ``p'`` from the chain rule,
    after removing its component along ``p`` (the normalization ``p_4 = 1``
    fixes ``p`` only up to a positive factor).
    """
    pts = np.asarray(points, float)
    u = np.asarray(controls, float)
    v = _chart_values(frame, pts)
    A, B = v[:, 0], v[:, 1]
    gA, gB = v[:, 2:6], v[:, 6:10]
    gA1, gB1 = v[:, 10:14], v[:, 14:18]
    A1, B1 = gA[:, 0], gB[:, 0]
    M = frame.bracket_columns(pts)
    out = {
        "X1": np.abs(np.einsum("ni,ni->n", p, M[:, :, 0])),
        "X2": np.abs(np.einsum("ni,ni->n", p, M[:, :, 1])),
        "bracket": np.abs(np.einsum("ni,ni->n", p, M[:, :, 2])),
        "order3": np.abs(
            u[:, 0] * np.einsum("ni,ni->n", p, M[:, :, 3])
            + u[:, 1] * np.einsum("ni,ni->n", p, M[:, :, 4])
        ),
    }
    # x' = u1 e1 + u2 (e2 + A e3 + B e4)
    xdot = np.zeros_like(pts)
    xdot[:, 0] = u[:, 0]
    xdot[:, 1] = u[:, 1]
    xdot[:, 2] = u[:, 1] * A
    xdot[:, 3] = u[:, 1] * B

    def d(g):
        return np.einsum("ni,ni->n", g, xdot)

    p3 = -B1 / A1
    dp3 = -(d(gB1) * A1 - B1 * d(gA1)) / A1**2
    dp2 = -d(gA) * p3 - A * dp3 - d(gB)
    pdot = np.zeros_like(pts)
    pdot[:, 1] = dp2
    pdot[:, 2] = dp3
    # X1 is constant; (p.DX2)_j = p3 dA/dx_j + p4 dB/dx_j
    r = pdot + u[:, 1:2] * (p[:, 2:3] * gA + p[:, 3:4] * gB)
    r_perp = r - r[:, 3:4] * p / p[:, 3:4]
    out["adjoint"] = np.linalg.norm(r_perp, axis=1)
    return out


def _fd_adjoint_residual(frame: Frame, path: FlowPath, adj: AdjointPath) -> float:
    """Finite-difference version of the projected adjoint residual (diagnostic)."""
    if len(adj.times) < 3:
        return 0.0
    pdot = np.gradient(adj.p, adj.times, axis=0, edge_order=2)
    _, J = frame.x2_and_jacobian(path.points)
    p = adj.p
    r = pdot + path.controls[:, 1:2] * np.einsum("ni,nij->nj", p, J)
    r_perp = r - r[:, 3:4] * p / p[:, 3:4]
    return float(np.max(np.linalg.norm(r_perp, axis=1)))


def verify_singularity(frame: Frame, path: FlowPath, adj: AdjointPath, tol: float = 1e-8,
                       raise_on_fail: bool = True) -> SingularityReport:
    """Audit the adjoint conditions at every node of ``path``."""
    if len(path.times) != len(adj.times) or not np.allclose(path.times, adj.times, atol=1e-14):
        raise ValueError("path and adjoint grids differ")
    if path.controls is None:
        raise ValueError("path carries no control values")
    if np.any(np.linalg.norm(adj.p, axis=1) == 0.0):
        raise CertificateFailed("zero covector", quantity="p")
    res = certificate_residuals(frame, path.points, path.controls, adj.p)
    fd = _fd_adjoint_residual(frame, path, adj)
    # the chain-rule derivative is only valid for the chart covector itself
    try:
        chart = adjoint_certificate(frame, path).p
        exact = np.allclose(chart, adj.p, rtol=1e-12, atol=1e-12)
    except ChartDegenerate:
        exact = False
    if not exact:
        res["adjoint"] = np.full(len(adj.times), fd)
    maxima = {k: float(v.max()) for k, v in res.items()}
    worst = {k: int(np.argmax(v)) for k, v in res.items()}
    rep = SingularityReport(maxima, worst, fd, tol)
    if raise_on_fail and not rep.ok:
        q = next(k for k in ("X1", "X2", "bracket", "order3", "adjoint") if maxima[k] > tol)
        raise CertificateFailed(
            f"residual '{q}' = {maxima[q]:.3e} exceeds {tol:g} at node {worst[q]}",
            node=worst[q], quantity=q, value=maxima[q],
        )
    return rep


def annihilator(frame: Frame, x) -> np.ndarray:
    """Unit covector killing ``X1, X2, [X1, X2]`` at ``x``.

    Null vector of the 3x4 matrix by SVD; sign fixed so that the last
    nonzero component is positive.
    """
    M = frame.bracket_columns(x)[:, :3].T
    _, _, vt = np.linalg.svd(M)
    a = vt[-1]
    nz = np.flatnonzero(np.abs(a) > 1e-14)
    if nz.size and a[nz[-1]] < 0:
        a = -a
    return a


def kernel_residual(sf: SingularField, x) -> float:
    """Relative defect of ``(alpha1, alpha2)`` in the kernel of the order-3 form."""
    x = np.asarray(x, float)
    a = annihilator(sf.frame, x)
    M = sf.frame.bracket_columns(x)
    l1, l2 = a @ M[:, 3], a @ M[:, 4]
    al = sf.controls(x)
    scale = max(np.hypot(l1, l2) * np.hypot(*al), 1e-300)
    return float(abs(al[0] * l1 + al[1] * l2) / scale)


def write_flow_csv(path_out, frame: Frame, path: FlowPath, adj: AdjointPath) -> None:
    res = certificate_residuals(frame, path.points, path.controls, adj.p)
    with open(path_out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x1", "x2", "x3", "x4", "p1", "p2", "p3", "p4", "res_X1", "res_X2", "res_bracket"])
        for k, t in enumerate(path.times):
            row = [t, *path.points[k], *adj.p[k], res["X1"][k], res["X2"][k], res["bracket"][k]]
            w.writerow([f"{v:.17g}" for v in row])
