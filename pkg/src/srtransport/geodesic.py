"""Endpoint map, variational rank, normal geodesics and SR distances.

Controls are piecewise constant on ``N`` uniform intervals of ``[0, T]``; the
driven ODE ``x' = u1 X1(x) + u2 X2(x)`` is integrated by RK4 with a fixed
number of substeps per interval. Sensitivities are obtained by running RK4
on the system augmented with its tangent equation, so they are the exact
derivative of the discrete endpoint map.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from . import _kernels
from .errors import LeftDomain, NotConverged
from .structure import Frame

DEFAULT_N = 32
SUBSTEPS = 2


@dataclass
class Control:
    T: float
    values: np.ndarray  # (N, 2)

    def __post_init__(self):
        self.values = np.asarray(self.values, float).reshape(-1, 2)
        if self.values.shape[0] < 1:
            raise ValueError("a control needs at least one interval")
        if not self.T > 0:
            raise ValueError("time horizon must be positive")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> float:
        return self.T / self.N

    @classmethod
    def constant(cls, u, T: float = 1.0, N: int = DEFAULT_N) -> "Control":
        return cls(T, np.tile(np.asarray(u, float), (N, 1)))

    @classmethod
    def zero(cls, T: float = 1.0, N: int = DEFAULT_N) -> "Control":
        return cls(T, np.zeros((N, 2)))

    def refined(self, factor: int = 2) -> "Control":
        return Control(self.T, np.repeat(self.values, factor, axis=0))

    def flat(self) -> np.ndarray:
        return self.values.ravel()


@dataclass
class HorizontalPath:
    control: Control
    start: np.ndarray
    nodes: np.ndarray  # (N + 1, 4) at interval boundaries

    @property
    def end(self) -> np.ndarray:
        return self.nodes[-1]


def reverse_control(u: Control) -> Control:
    """Control tracing the same path backwards: ``-u(T - t)``."""
    return Control(u.T, -u.values[::-1].copy())


def length_energy(frame: Frame | None, u: Control) -> tuple:
    """``(sum h |u_k|, sum h |u_k|^2)``; the frame is orthonormal so no metric enters."""
    nrm = np.hypot(u.values[:, 0], u.values[:, 1])
    return float(u.h * nrm.sum()), float(u.h * (nrm**2).sum())


def _stage(frame: Frame, x, u, Y=None, V=None):
    """Vector field at ``x`` and, with a tangent ``Y`` (4, K), its derivative.

    ``V`` (K, 2) holds the control perturbations active at this stage.
    """
    v = frame.ab_bundle(x)
    X2 = np.array([0.0, 1.0, v[0], v[1]])
    f = X2 * u[1]
    f[0] += u[0]
    if Y is None:
        return f, None
    # D(u1 X1 + u2 X2) = u2 DX2 with nonzero rows 3, 4 only
    dY = np.zeros_like(Y)
    dY[2] = u[1] * (v[2:6] @ Y)
    dY[3] = u[1] * (v[6:10] @ Y)
    if V is not None:
        dY[0] += V[:, 0]
        dY += np.outer(X2, V[:, 1])
    return f, dY


def _integrate(frame: Frame, x, u: Control, substeps: int = SUBSTEPS, tangent=None,
               record: bool = False, check_box: bool = False):
    """RK4 through all control intervals.

    ``tangent`` is an (N, K, 2) array of control perturbations per interval,
    or ``None``. Returns ``(x_T, Y_T, nodes)`` with ``Y_T`` of shape (4, K).
    The compiled kernel integrates in the interval-rescaled time, so controls
    and perturbations are multiplied by the interval length first.
    """
    bundle = frame.ab_bundle
    hi = u.h
    U = np.ascontiguousarray(u.values * hi)
    if tangent is None:
        V = np.zeros((u.N, 0, 2))
    else:
        V = np.ascontiguousarray(np.asarray(tangent, float) * hi)
    nodes = np.empty((u.N + 1, 4))
    xT, Y = _kernels.integrate(bundle.exps.astype(np.int64), bundle.coef, np.asarray(x, float),
                               U, int(substeps), V, tangent is not None, nodes)
    if check_box:
        inside = frame.box.contains(nodes, atol=1e-9)
        if not inside.all():
            k = int(np.argmin(inside))
            raise LeftDomain(f"trajectory left the box at t={k * hi:.6g}", k * hi, tuple(nodes[k]))
    return xT, (Y if tangent is not None else None), (nodes if record else None)


def endpoint(frame: Frame, x, u: Control, substeps: int = SUBSTEPS, check_box: bool = True) -> np.ndarray:
    """The endpoint map: position at time ``T`` of the path driven by ``u``."""
    return _integrate(frame, x, u, substeps, check_box=check_box)[0]


def horizontal_path(frame: Frame, x, u: Control, substeps: int = SUBSTEPS, check_box: bool = True) -> HorizontalPath:
    _, _, nodes = _integrate(frame, x, u, substeps, record=True, check_box=check_box)
    return HorizontalPath(u, np.asarray(x, float), nodes)


def endpoint_and_sensitivity(frame: Frame, x, u: Control, substeps: int = SUBSTEPS):
    """Endpoint and its Jacobian ``S`` (4 x 2N) with respect to the flattened control."""
    N = u.N
    V = np.zeros((N, 2 * N, 2))
    idx = np.arange(N)
    V[idx, 2 * idx, 0] = 1.0
    V[idx, 2 * idx + 1, 1] = 1.0
    xT, S, _ = _integrate(frame, x, u, substeps, tangent=V)
    return xT, S


# -- regularity ------------------------------------------------------------

@dataclass
class RankReport:
    singular_values: np.ndarray
    rank: int
    directions_used: list
    threshold: float


def _probe_lookup(probes, N: int):
    """Map a list of probe Controls onto interval ``k`` of an ``N``-grid."""
    for pr in probes:
        if N % pr.N != 0 and pr.N % N != 0:
            raise ValueError("probe grid must nest with the control grid")
    if any(pr.N > N for pr in probes):
        raise ValueError("probes finer than the control grid are not supported")
    k = np.arange(N)
    return np.stack([pr.values[(k * pr.N) // N] for pr in probes], axis=1)


def random_probes(rng: np.random.Generator, T: float, count: int = 4, N: int = 8) -> list:
    return [Control(T, rng.standard_normal((N, 2))) for _ in range(count)]


def _rank_from(images: np.ndarray, probes, rank_tol: float) -> RankReport:
    s = np.linalg.svd(images, compute_uv=False)
    thr = rank_tol * max(1.0, float(s[0]) if s.size else 0.0)
    return RankReport(s, int(np.sum(s > thr)), list(probes), thr)


def variational_rank(frame: Frame, x, u: Control, probes, rank_tol: float = 1e-9,
                     substeps: int = SUBSTEPS) -> RankReport:
    """Singular values of ``[D_u E(v^1) ... D_u E(v^4)]`` via the linearized ODE."""
    V = _probe_lookup(probes, u.N)
    _, Y, _ = _integrate(frame, x, u, substeps, tangent=V, check_box=True)
    return _rank_from(Y, probes, rank_tol)


@dataclass
class RankVerdict:
    singular: bool
    ranks: list
    min_singular_values: list
    full_singular_values: list = field(default_factory=list)

    @property
    def rank(self) -> int:
        return max(self.ranks)


def variational_verdict(frame: Frame, x, u: Control, trials: int = 10, seed: int = 0,
                        rank_tol: float = 1e-9, probe_N: int | None = None) -> RankVerdict:
    """Repeat :func:`variational_rank` with fresh random probes.

    The control is declared singular only if every trial has rank < 4.
    """
    rng = np.random.default_rng(seed)
    pN = probe_N or min(u.N, 8)
    if u.N % pN:
        pN = u.N
    ranks, mins, svs = [], [], []
    for _ in range(trials):
        rep = variational_rank(frame, x, u, random_probes(rng, u.T, 4, pN), rank_tol)
        ranks.append(rep.rank)
        mins.append(float(rep.singular_values[-1]))
        svs.append(rep.singular_values)
    return RankVerdict(all(r < 4 for r in ranks), ranks, mins, svs)


def flow_variational_rank(sf, x0, sign: int = 1, T: float = 0.5, steps: int = 64, probes=None,
                          rank_tol: float = 1e-5, rng=None) -> RankReport:
    """Variational rank along a singular-field trajectory.

    The control is ``u(t) = sign * alpha(gamma(t))`` evaluated at the RK4
    stages, so the path is the flow of ``X`` itself; the tangent equation is
    integrated with those controls held fixed.
    """
    frame = sf.frame
    if probes is None:
        rng = rng or np.random.default_rng(0)
        probes = random_probes(rng, T, 4, 8)
    x = np.array(x0, float)
    h = T / steps
    Y = np.zeros((4, len(probes)))
    s = float(sign)

    def stage(xs, Ys, V):
        u = s * sf.controls(xs)
        return _stage(frame, xs, u, Ys, V)

    for k in range(steps):
        tm = (k + 0.5) * h
        V = np.array([pr.values[min(int(tm / pr.h), pr.N - 1)] for pr in probes])
        k1, m1 = stage(x, Y, V)
        k2, m2 = stage(x + 0.5 * h * k1, Y + 0.5 * h * m1, V)
        k3, m3 = stage(x + 0.5 * h * k2, Y + 0.5 * h * m2, V)
        k4, m4 = stage(x + h * k3, Y + h * m3, V)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        Y = Y + (h / 6.0) * (m1 + 2 * m2 + 2 * m3 + m4)
    return _rank_from(Y, probes, rank_tol)


# -- normal geodesics ------------------------------------------------------

def hamiltonian(frame: Frame, x, p):
    """``H = ((p.X1)^2 + (p.X2)^2) / 2`` at points/covectors ``(..., 4)``."""
    x = np.asarray(x, float)
    p = np.asarray(p, float)
    v = frame.ab_bundle(x)
    h2 = p[..., 1] + p[..., 2] * v[..., 0] + p[..., 3] * v[..., 1]
    return 0.5 * (p[..., 0] ** 2 + h2**2)


def _ham_rhs(frame: Frame):
    def rhs(t, y):
        x, p = y[..., :4], y[..., 4:]
        v = frame.ab_bundle(x)
        A, B = v[..., 0], v[..., 1]
        gA, gB = v[..., 2:6], v[..., 6:10]
        h1 = p[..., 0]
        h2 = p[..., 1] + p[..., 2] * A + p[..., 3] * B
        out = np.empty_like(y)
        out[..., 0] = h1
        out[..., 1] = h2
        out[..., 2] = h2 * A
        out[..., 3] = h2 * B
        out[..., 4:] = -h2[..., None] * (p[..., 2:3] * gA + p[..., 3:4] * gB)
        return out

    return rhs


def _ham_steps(p0, t: float, steps: int | None) -> int:
    if steps:
        return steps
    scale = float(np.max(np.linalg.norm(np.atleast_2d(p0), axis=-1))) if np.size(p0) else 0.0
    return int(min(4000, max(100, math.ceil(200.0 * abs(t) * max(1.0, scale)))))


def hamiltonian_flow(frame: Frame, x, p0, t: float = 1.0, steps: int | None = None, record: bool = False):
    """Integrate the normal Hamiltonian system; returns ``(x_t, p_t)`` or trajectories."""
    from ._numerics import rk4

    x = np.asarray(x, float)
    p0 = np.asarray(p0, float)
    y0 = np.concatenate([x, np.broadcast_to(p0, x.shape)], axis=-1)
    n = _ham_steps(p0, t, steps)
    y = rk4(_ham_rhs(frame), y0, t, n, record=record)
    return y[..., :4], y[..., 4:]


def hamiltonian_exp(frame: Frame, x, p0, t: float = 1.0, steps: int | None = None,
                    check_box: bool = False) -> np.ndarray:
    """Position at time ``t`` of the normal geodesic with initial covector ``p0``."""
    xt, _ = hamiltonian_flow(frame, x, p0, t, steps)
    if check_box and not np.all(frame.box.contains(xt, atol=1e-9)):
        raise LeftDomain("normal geodesic left the box", t, None)
    return xt


# -- distance --------------------------------------------------------------

@dataclass
class DistanceOptions:
    N: int = DEFAULT_N
    T: float = 1.0
    starts: int = 8
    mus: tuple = (1e1, 1e2, 1e3, 1e4, 1e5, 1e6)
    max_nfev: int = 200
    endpoint_tol: float = 1e-6
    seed: int = 0
    substeps: int = SUBSTEPS


@dataclass
class DistanceResult:
    d: float
    control: Control
    lower_bound: float
    endpoint_error: float
    converged: bool
    energy: float
    start_index: int
    start_energies: list = field(default_factory=list)

    @property
    def upper_bound(self) -> float:
        return self.d


def _starts(x, y, opts: DistanceOptions, u0: Control | None) -> list:
    N, T = opts.N, opts.T
    rng = np.random.default_rng(opts.seed)
    delta = np.asarray(y, float) - np.asarray(x, float)
    straight = np.tile(delta[:2] / T, (N, 1))
    t = (np.arange(N) + 0.5) / N
    r = max(0.5, float(np.linalg.norm(delta)))
    loop = r * np.stack([np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)], axis=1)
    out = [] if u0 is None else [u0.values.copy()]
    out += [straight, straight + loop, straight - loop]
    while len(out) < opts.starts:
        out.append(straight + r * rng.standard_normal((N, 2)))
    return [Control(T, v) for v in out[: max(opts.starts, 1)]]


def _polish(frame, x, y, v, opts: DistanceOptions, mus=None) -> np.ndarray:
    """Penalty rounds of Levenberg-Marquardt on the residual form.

    ``|sqrt(h) u|^2 + mu |E(u) - y|^2`` is a sum of squares with Jacobian
    ``[sqrt(h) I; sqrt(mu) S]``.
    """
    N, T = opts.N, opts.T
    sh = math.sqrt(T / N)
    cache = {}

    def evaluate(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = endpoint_and_sensitivity(frame, x, Control(T, z), opts.substeps)
        return cache[key]

    z = v.ravel().copy()
    for mu in (opts.mus if mus is None else mus):
        sm = math.sqrt(mu)

        def res(z):
            e, _ = evaluate(z)
            return np.concatenate([sh * z, sm * (e - y)])

        def jac(z):
            _, S = evaluate(z)
            return np.vstack([sh * np.eye(z.size), sm * S])

        sol = least_squares(res, z, jac=jac, method="lm", max_nfev=opts.max_nfev, xtol=1e-12, ftol=1e-12)
        z = sol.x
    return z


def _restore(frame, x, y, z, opts: DistanceOptions, iters: int = 20) -> tuple:
    """Gauss-Newton minimum-norm corrections driving the endpoint onto ``y``."""
    T = opts.T
    for _ in range(iters):
        e, S = endpoint_and_sensitivity(frame, x, Control(T, z), opts.substeps)
        err = y - e
        if np.linalg.norm(err) <= 1e-12:
            break
        dz, *_ = np.linalg.lstsq(S, err, rcond=1e-10)
        z = z + dz
    e = endpoint(frame, x, Control(T, z), opts.substeps, check_box=False)
    return z, float(np.linalg.norm(e - y))


def distance_lower_bound(frame: Frame, x, y, kappa: float | None = None) -> float:
    """``max(|(dx1, dx2)|, |x - y| / kappa)``; both bound every horizontal length."""
    delta = np.asarray(y, float) - np.asarray(x, float)
    kappa = kappa or frame.frame_norm_bound()
    return float(max(np.hypot(delta[0], delta[1]), np.linalg.norm(delta) / kappa))


def sr_distance(frame: Frame, x, y, opts: DistanceOptions | None = None, u0: Control | None = None,
                kappa: float | None = None, raise_on_fail: bool = True) -> DistanceResult:
    """Upper bound on ``d_SR(x, y)`` from the best feasible control found.

    Starts are polished independently and the lowest-energy start meeting
    the endpoint tolerance wins (ties go to the lower start index).
    """
    opts = opts or DistanceOptions()
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    lb = distance_lower_bound(frame, x, y, kappa)
    if np.array_equal(x, y):
        return DistanceResult(0.0, Control.zero(opts.T, opts.N), 0.0, 0.0, True, 0.0, 0, [0.0])
    best = None
    energies = []
    seen = []  # (first-round control, final energy, control, error)
    for idx, start in enumerate(_starts(x, y, opts, u0)):
        try:
            z1 = _polish(frame, x, y, start.values, opts, opts.mus[:1])
            dup = next((rec for rec in seen if np.linalg.norm(rec[0] - z1) <= 1e-6 * (1.0 + np.linalg.norm(z1))), None)
            if dup is not None:
                # merged with an earlier start: same basin after the first round
                energies.append(dup[1])
                continue
            z = _polish(frame, x, y, z1, opts, opts.mus[1:])
            z, err = _restore(frame, x, y, z, opts)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError):
            energies.append(math.inf)
            continue
        u = Control(opts.T, z.reshape(-1, 2))
        _, energy = length_energy(frame, u)
        ok = err <= opts.endpoint_tol and math.isfinite(energy)
        energies.append(energy if ok else math.inf)
        seen.append((z1, energies[-1], u, err))
        if ok and (best is None or energy < best[0]):
            best = (energy, idx, u, err)
    if best is None:
        if raise_on_fail:
            raise NotConverged(f"no start reached endpoint tolerance {opts.endpoint_tol:g}")
        return DistanceResult(math.nan, Control.zero(opts.T, opts.N), lb, math.inf, False, math.nan, -1, energies)
    energy, idx, u, err = best
    return DistanceResult(math.sqrt(opts.T * energy), u, lb, err, True, energy, idx, energies)


class DistanceCache:
    """In-memory memo of distance solves with CSV persistence."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._d: dict = {}

    @staticmethod
    def _key(x, y):
        return tuple(float(v) for v in x) + tuple(float(v) for v in y)

    def get(self, x, y):
        return self._d.get(self._key(x, y))

    def put(self, x, y, d: float, converged: bool):
        self._d[self._key(x, y)] = (float(d), bool(converged))

    def __len__(self):
        return len(self._d)

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x1", "x2", "x3", "x4", "y1", "y2", "y3", "y4", "d", "converged"])
            for key in sorted(self._d):
                d, conv = self._d[key]
                w.writerow([f"{v:.17g}" for v in key] + [f"{d:.17g}", int(conv)])

    @classmethod
    def load(cls, path) -> "DistanceCache":
        with open(path) as fh:
            head = fh.readline().strip()
            seed = int(head.split("=", 1)[1]) if head.startswith("# seed=") else 0
            cache = cls(seed)
            rows = csv.reader(fh)
            next(rows, None)
            for row in rows:
                vals = [float(v) for v in row[:9]]
                cache._d[tuple(vals[:8])] = (vals[8], bool(int(row[9])))
        return cache
