"""Volume evolution under the singular flow and related contraction experiments.

Two estimators of ``vol(phi_t(A))`` are always produced side by side:

* ``vol_div``: the Jacobian integral ``vol(A) * mean_z J(t, z)`` where
  ``J' = div X(phi_t z) J`` is co-integrated with the flow;
* ``vol_mc``: occupancy counting. Fresh uniform points in a box around the
  flowed cloud are flowed back by ``t``; a point belongs to ``phi_t(A)``
  iff it lands in ``A``.

Both come with standard errors so that they can be compared and audited
against the lower bound ``exp(-C l(A, t)) vol(A)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ._numerics import central_gradient, central_hessian
from .errors import AuditFailed, DegenerateSplit
from .geodesic import hamiltonian_exp
from .singular import SingularField, auto_steps, flow_points
from .structure import DomainBox, Frame

L_SAFETY = 1.05


@dataclass
class SampleCloud:
    """Samples of a base region ``A`` (a box), in Monte-Carlo or grid mode."""

    base: DomainBox | None
    samples: np.ndarray
    mode: str = "mc"
    cell_volume: float = 0.0

    @classmethod
    def uniform(cls, base: DomainBox, n: int, rng: np.random.Generator) -> "SampleCloud":
        return cls(base, base.sample(rng, n), "mc")

    @classmethod
    def grid(cls, base: DomainBox, k: int) -> "SampleCloud":
        """Cell-centred grid with ``k`` cells per axis."""
        axes = [lo + (np.arange(k) + 0.5) * (hi - lo) / k for lo, hi in zip(base.lo, base.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        return cls(base, pts, "grid", base.volume / k**4)

    @classmethod
    def finite(cls, points) -> "SampleCloud":
        """A finite point set: Lebesgue measure zero."""
        return cls(None, np.atleast_2d(np.asarray(points, float)), "grid", 0.0)

    @property
    def volume(self) -> float:
        if self.base is None:
            return 0.0
        return self.base.volume

    def __len__(self):
        return len(self.samples)

    def indicator(self, pts) -> np.ndarray:
        if self.base is None:
            return np.zeros(len(pts), bool)
        return self.base.contains(pts, atol=0.0)


@dataclass
class JacobianTrace:
    times: np.ndarray
    J: np.ndarray
    points: np.ndarray


def jacobian_trace(sf: SingularField, z, sign: int = 1, T: float = 1.0, steps: int | None = None) -> JacobianTrace:
    """``J(t, z)`` along the flow from ``z``; ``J(0) = 1``."""
    steps = steps or auto_steps(sf, T)
    bf = flow_points(sf, np.asarray(z, float)[None, :], sign, T, steps, jacobian=True, record_every=1)
    times = np.array([h[0] for h in bf.history])
    J = np.array([h[2][0] for h in bf.history])
    pts = np.array([h[1][0] for h in bf.history])
    return JacobianTrace(times, J, pts)


@dataclass
class VolumeReport:
    times: np.ndarray
    vol_mc: np.ndarray
    stderr: np.ndarray
    vol_div: np.ndarray
    stderr_div: np.ndarray
    lower_bound: np.ndarray
    l_A_t: np.ndarray
    vol_A: float
    C: float
    mode: str
    sign: int
    samples: int
    min_J: float = 1.0
    inside_box: bool = True

    @property
    def combined_sigma(self) -> np.ndarray:
        return np.sqrt(self.stderr**2 + self.stderr_div**2)

    def estimator_gap(self) -> np.ndarray:
        """``|vol_div - vol_mc|`` in units of the combined standard error."""
        sig = self.combined_sigma
        gap = np.abs(self.vol_div - self.vol_mc)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(sig > 0, gap / sig, np.where(gap > 1e-12, np.inf, 0.0))

    def estimators_agree(self, k: float = 3.0) -> bool:
        return bool(np.all(self.estimator_gap() <= k))


def _time_grid(T: float, points: int) -> np.ndarray:
    return np.linspace(0.0, T, points + 1)


def _occupancy(sf: SingularField, A: SampleCloud, cloud: np.ndarray, sign: int, t: float, M: int,
               rng: np.random.Generator, base_steps: int, T: float, inflate: float = 0.1):
    """Occupancy estimate of ``phi_t(A)`` from ``M`` back-flowed probe points."""
    if A.volume == 0.0:
        return 0.0, 0.0
    if t == 0.0:
        lo, hi = A.base.lo, A.base.hi
    else:
        lo, hi = cloud.min(axis=0), cloud.max(axis=0)
        pad = inflate * (hi - lo) + 1e-9
        lo, hi = lo - pad, hi + pad
    vol_box = float(np.prod(hi - lo))
    if A.mode == "grid":
        k = max(2, int(round(M ** 0.25)))
        W = SampleCloud.grid(DomainBox.from_bounds(lo, hi), k).samples
    else:
        W = rng.uniform(lo, hi, size=(M, 4))
    if t > 0.0:
        steps = max(1, int(math.ceil(base_steps * t / T)))
        back = flow_points(sf, W, -sign, t, steps).end
    else:
        back = W
    p = float(np.mean(A.indicator(back)))
    return vol_box * p, vol_box * math.sqrt(p * (1.0 - p) / len(W))


def volume_evolution(sf: SingularField, A: SampleCloud, sign: int = 1, T: float = 1.0, points: int = 8,
                     n_mc: int | None = None, seed: int = 0, steps: int | None = None,
                     C: float | None = None) -> VolumeReport:
    """Volume of ``phi_t(A)`` on ``points`` equally spaced times by both estimators."""
    rng = np.random.default_rng(seed)
    steps = steps or max(points, auto_steps(sf, T))
    steps = int(math.ceil(steps / points) * points)  # grid times fall on steps
    times = _time_grid(T, points)
    bf = flow_points(sf, A.samples, sign, T, steps, jacobian=True, length=True, record_every=steps // points)
    M = n_mc or len(A)
    C = sf.C_bound if C is None else C
    vol_mc, se_mc, vol_div, se_div, lvals = [], [], [], [], []
    min_J = 1.0
    for (t, pts, J, l), tt in zip(bf.history, times):
        min_J = min(min_J, float(J.min()) if len(J) else 1.0)
        if A.mode == "grid":
            vd = A.cell_volume * float(J.sum())
            sd = 0.0
        else:
            vd = A.volume * float(J.mean())
            sd = A.volume * float(J.std(ddof=1)) / math.sqrt(len(J)) if len(J) > 1 else 0.0
        vm, sm = _occupancy(sf, A, pts, sign, tt, M, rng, steps, T)
        vol_mc.append(vm)
        se_mc.append(sm)
        vol_div.append(vd)
        se_div.append(sd)
        lvals.append(float(l.max()) if len(l) else 0.0)
    lvals = np.array(lvals)
    return VolumeReport(
        times=times,
        vol_mc=np.array(vol_mc),
        stderr=np.array(se_mc),
        vol_div=np.array(vol_div),
        stderr_div=np.array(se_div),
        lower_bound=np.exp(-C * L_SAFETY * lvals) * A.volume,
        l_A_t=lvals,
        vol_A=A.volume,
        C=C,
        mode=A.mode,
        sign=sign,
        samples=len(A),
        min_J=min_J,
        inside_box=bool(np.all(bf.inside)),
    )


def contraction_audit(report: VolumeReport, C: float | None = None, k: float = 3.0,
                      raise_on_fail: bool = True) -> bool:
    """Check ``vol(phi_t A) >= exp(-C l(A, t)) vol(A) - k stderr`` at every time."""
    C = report.C if C is None else C
    bound = np.exp(-C * L_SAFETY * report.l_A_t) * report.vol_A
    slack = report.vol_mc + k * report.stderr - bound
    bad = np.flatnonzero(slack < -1e-12)
    if bad.size:
        t = float(report.times[bad[0]])
        if raise_on_fail:
            raise AuditFailed(
                f"volume {report.vol_mc[bad[0]]:.6g} below bound {bound[bad[0]]:.6g} at t={t:.4g}", time=t,
            )
        return False
    return True


# -- measure-zero experiments (consistency evidence) ------------------------------

@dataclass
class AttractionReport:
    times: np.ndarray
    vol_mc: np.ndarray
    stderr: np.ndarray
    vol_div: np.ndarray
    bound: float
    L: float
    C: float
    ok: bool
    label: str = "consistency evidence"


def path_length_bound(sf: SingularField, T: float, n: int = 9, safety: float = 1.1) -> float:
    """``L >= int_0^T |X|_g ds`` along any flow line staying in the box."""
    pts = sf.frame.box.grid(n)
    return T * float(sf.norm_g(pts).max()) * safety


def hc_attraction_experiment(sf: SingularField, A: SampleCloud, T_max: float = 2.0, points: int = 8,
                             sign: int = 1, n_mc: int | None = None, seed: int = 0) -> AttractionReport:
    """Volume curve of ``phi_t(A)`` against the uniform floor ``exp(-C L) vol(A)``."""
    rep = volume_evolution(sf, A, sign, T_max, points, n_mc, seed)
    L = path_length_bound(sf, T_max)
    bound = math.exp(-rep.C * L) * A.volume
    ok = bool(np.all(rep.vol_mc + 3 * rep.stderr >= bound - 1e-12))
    return AttractionReport(rep.times, rep.vol_mc, rep.stderr, rep.vol_div, bound, L, rep.C, ok)


@dataclass
class SplitReport:
    times: np.ndarray
    fractions: tuple
    disjoint: list
    min_separation: list
    union_ratio: np.ndarray
    union_stderr: np.ndarray
    piece_vol: list
    piece_bound: list
    pieces_ok: bool
    ok: bool
    label: str = "consistency evidence"


def _in_box(box: DomainBox, pts) -> np.ndarray:
    return box.contains(pts, atol=0.0)


def _boxes_overlap(a: DomainBox, b: DomainBox) -> bool:
    return bool(np.all(a.lo < b.hi) and np.all(b.lo < a.hi))


def disjoint_projection_experiment(sf: SingularField, A: SampleCloud, targets1: DomainBox, targets2: DomainBox,
                                   T: float = 1.0, points: int = 8, sign: int = 1, n_mc: int | None = None,
                                   seed: int = 0) -> SplitReport:
    """Split ``A`` by the target region its time-``T`` image reaches.

    At each intermediate time the class of every flowed point is recomputed
    by flowing it over the remaining time; disjointness holds when no point
    of one cloud is re-assigned to the other class. The union volume ratio
    uses occupancy counting, and each piece is checked against its own
    contraction bound via the Jacobian estimator.
    """
    if _boxes_overlap(targets1, targets2):
        raise ValueError("target regions must be disjoint")
    rng = np.random.default_rng(seed)
    steps = max(points, auto_steps(sf, T))
    steps = int(math.ceil(steps / points) * points)
    bf = flow_points(sf, A.samples, sign, T, steps, jacobian=True, length=True, record_every=steps // points)
    end = bf.end
    c1, c2 = _in_box(targets1, end), _in_box(targets2, end)
    if not c1.any() or not c2.any():
        raise DegenerateSplit("one class of the split is empty")
    times = _time_grid(T, points)
    C = sf.C_bound
    disjoint, sep, ratio, rse, pvol, pbound = [], [], [], [], [], []
    M = n_mc or len(A)
    f1, f2 = float(c1.mean()), float(c2.mean())
    for (t, pts, J, l), tt in zip(bf.history, times):
        rest = T - tt
        if rest > 0:
            nsteps = max(1, int(round(steps * rest / T)))
            fwd = flow_points(sf, pts, sign, rest, nsteps).end
        else:
            fwd = pts
        d1, d2 = _in_box(targets1, fwd[c1]), _in_box(targets2, fwd[c2])
        disjoint.append(bool(d1.all() and d2.all() and not _in_box(targets2, fwd[c1]).any()
                             and not _in_box(targets1, fwd[c2]).any()))
        a, b = pts[c1], pts[c2]
        # coarse separation check on subsamples
        sa = a[:: max(1, len(a) // 500)]
        sb = b[:: max(1, len(b) // 500)]
        sep.append(float(np.min(np.linalg.norm(sa[:, None, :] - sb[None, :, :], axis=-1))))
        # occupancy of the union: probes flowed back to A, then forward to a target
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = 0.1 * (hi - lo) + 1e-9
        lo, hi = lo - pad, hi + pad
        W = rng.uniform(lo, hi, size=(M, 4))
        if tt > 0:
            back = flow_points(sf, W, -sign, tt, max(1, int(round(steps * tt / T)))).end
        else:
            back = W
        inA = A.indicator(back)
        hit = np.zeros(M, bool)
        if inA.any():
            e = flow_points(sf, back[inA], sign, T, steps).end
            hit[np.flatnonzero(inA)] = _in_box(targets1, e) | _in_box(targets2, e)
        p = float(hit.mean())
        vb = float(np.prod(hi - lo))
        ratio.append(vb * p / A.volume)
        rse.append(vb * math.sqrt(p * (1 - p) / M) / A.volume)
        lb = []
        pv = []
        for cls, frac in ((c1, f1), (c2, f2)):
            pv.append(A.volume * float(J[cls].sum()) / len(J))
            lb.append(math.exp(-C * L_SAFETY * float(l[cls].max())) * A.volume * frac)
        pvol.append(pv)
        pbound.append(lb)
    ratio = np.array(ratio)
    rse = np.array(rse)
    pieces_ok = all(v >= b - 1e-12 for pv, pb in zip(pvol, pbound) for v, b in zip(pv, pb))
    union_ok = bool(np.all(ratio <= 1.0 + 3 * rse + 1e-12))
    return SplitReport(times, (f1, f2), disjoint, sep, ratio, rse, pvol, pbound, pieces_ok,
                       bool(all(disjoint) and pieces_ok and union_ok))


# -- regular part ----------------------------------------------------------------

class QuadraticPotential:
    """``phi(z) = z.Q z / 2 + b.z + c`` with exact gradient."""

    def __init__(self, Q, b=None, c: float = 0.0):
        self.Q = np.asarray(Q, float)
        self.b = np.zeros(4) if b is None else np.asarray(b, float)
        self.c = float(c)

    def __call__(self, z):
        z = np.asarray(z, float)
        return 0.5 * np.einsum("...i,ij,...j->...", z, self.Q, z) + z @ self.b + self.c

    def gradient(self, z):
        return np.asarray(z, float) @ self.Q.T + self.b


def _grad(phi, pts, h):
    if hasattr(phi, "gradient"):
        return phi.gradient(pts)
    return np.array([central_gradient(phi, z, h) for z in pts])


def _T_map(frame: Frame, phi, pts, t: float, h: float):
    """``T_t(x) = exp_x(t grad phi(x) / 2)``, matching the map convention of the transport module."""
    g = _grad(phi, pts, h)
    if not np.any(g):
        return np.array(pts, float)
    return hamiltonian_exp(frame, pts, 0.5 * t * g, 1.0)


def _jac_det(frame: Frame, phi, pts, t: float, h: float, hj: float = 1e-4):
    dets = np.empty(len(pts))
    cols = []
    for k in range(4):
        e = np.zeros(4)
        e[k] = hj
        cols.append((_T_map(frame, phi, pts + e, t, h) - _T_map(frame, phi, pts - e, t, h)) / (2 * hj))
    Jm = np.stack(cols, axis=-1)
    dets[:] = np.linalg.det(Jm)
    return dets


@dataclass
class RegularReport:
    times: np.ndarray
    hessian_min_eig: float
    ratio: np.ndarray
    ratio_stderr: np.ndarray
    C_tilde: np.ndarray
    ok: bool


def regular_contraction_audit(frame: Frame, phi, A: SampleCloud, T: float = 1.0, points: int = 4,
                              h: float = 1e-3, max_samples: int = 200) -> RegularReport:
    """Push ``A`` through ``T_t`` and compare the volume ratio with the pointwise floor.

    ``ratio(t)`` is the mean Jacobian determinant of ``T_t`` over the samples
    (finite differences), ``C_tilde(t)`` its minimum; the report also gives
    the smallest finite-difference Hessian eigenvalue of ``phi`` on ``A``.
    """
    pts = A.samples[:max_samples]
    lam = min(float(np.linalg.eigvalsh(central_hessian(phi, z, 10 * h)).min()) for z in pts[: min(50, len(pts))])
    times = _time_grid(T, points)
    ratio, se, ct = [], [], []
    for t in times:
        if t == 0.0:
            ratio.append(1.0)
            se.append(0.0)
            ct.append(1.0)
            continue
        d = np.abs(_jac_det(frame, phi, pts, t, h))
        ratio.append(float(d.mean()))
        se.append(float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0)
        ct.append(float(d.min()))
    ratio, se, ct = np.array(ratio), np.array(se), np.array(ct)
    ok = bool(np.all(ratio >= ct - 3 * se - 1e-12))
    return RegularReport(times, lam, ratio, se, ct, ok)


@dataclass
class MixedReport:
    times: np.ndarray
    singular_ratio: np.ndarray
    regular_floor: np.ndarray
    combined: np.ndarray
    union_ratio: np.ndarray
    regime: list
    first_separation: float | None
    label: str = "consistency evidence"


def mixed_experiment(sf: SingularField, phi, A: SampleCloud, T: float = 0.5, points: int = 4,
                     sign: int = 1, h: float = 1e-3, max_samples: int = 400) -> MixedReport:
    """Flow one half of ``A`` by the singular field and push the other half by ``T_t``.

    The halves interleave (even and odd samples) so both start on all of ``A``.

    Reports ``exp(-C l) + C_tilde`` (the two guaranteed fractions), the
    measured union volume ratio (sum of the two Jacobian estimates) and the first
    grid time at which the two image clouds have disjoint bounding boxes.
    """
    frame = sf.frame
    pts = A.samples[:max_samples]
    S, R = pts[0::2], pts[1::2]
    times = _time_grid(T, points)
    steps = max(points, auto_steps(sf, T))
    steps = int(math.ceil(steps / points) * points)
    bf = flow_points(sf, S, sign, T, steps, jacobian=True, length=True, record_every=steps // points)
    C = sf.C_bound
    sing, reg, comb, union, regime = [], [], [], [], []
    first = None
    for (t, sp, J, l), tt in zip(bf.history, times):
        if tt == 0.0:
            rp = R
            d = np.ones(len(R))
        else:
            rp = _T_map(frame, phi, R, tt, h)
            d = np.abs(_jac_det(frame, phi, R, tt, h))
        es = math.exp(-C * L_SAFETY * float(l.max()))
        sing.append(es)
        reg.append(float(d.min()))
        comb.append(es + float(d.min()))
        regime.append(bool(es + float(d.min()) > 1.0))
        union.append(0.5 * float(J.mean()) + 0.5 * float(d.mean()))
        sep = bool(np.any(sp.max(axis=0) < rp.min(axis=0)) or np.any(rp.max(axis=0) < sp.min(axis=0)))
        if sep and first is None:
            first = float(tt)
    return MixedReport(times, np.array(sing), np.array(reg), np.array(comb), np.array(union), regime, first)


# -- output --------------------------------------------------------------------

def write_volume_csv(path, report: VolumeReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "vol_mc", "stderr", "vol_div", "lower_bound", "l_A_t"])
        for k in range(len(report.times)):
            w.writerow([f"{v:.12g}" for v in (report.times[k], report.vol_mc[k], report.stderr[k],
                                               report.vol_div[k], report.lower_bound[k], report.l_A_t[k])])


def volume_summary(report: VolumeReport, audit_ok: bool) -> dict:
    gap = report.estimator_gap()
    return {
        "mode": report.mode,
        "samples": report.samples,
        "sign": report.sign,
        "C": report.C,
        "vol_A": report.vol_A,
        "estimators_agree": report.estimators_agree(),
        "max_estimator_gap_sigma": float(np.max(gap)) if gap.size else 0.0,
        "contraction_audit": audit_ok,
        "min_J": report.min_J,
        "inside_box": report.inside_box,
        "l_safety": L_SAFETY,
    }
