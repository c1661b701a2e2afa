"""Acceptance suite: ten property checks at desk scale.

Each ``criterion_*`` function returns a :class:`CriterionResult`. A criterion
passes when its numerical property holds and it finishes within its time
budget. ``run_all`` is what ``srtransport verify-all`` and the test suite
call.
"""

import functools
import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .contraction import SampleCloud, contraction_audit, volume_evolution
from .geodesic import Control, DistanceOptions, sr_distance, variational_verdict
from .scenarios import SHIPPED, load_scenario, region_box, scenario_frame
from .singular import (
    adjoint_certificate,
    divergence_bound_report,
    divergence_closed_form,
    flow,
    line_field,
    verify_singularity,
)
from .structure import (
    ONE,
    DomainBox,
    Frame,
    contracting_frame,
    cubic_frame,
    engel_frame,
    growth_check,
    hc_mask,
    random_frame,
    x1,
    x2,
)
from .transport import (
    DiscreteMeasure,
    contact_set,
    dual_potentials,
    semiconvex_support_test,
    solve_kantorovich,
    static_fixed_check,
    static_status,
    Classification,
)


@dataclass
class CriterionResult:
    number: int
    name: str
    ok: bool
    detail: str
    seconds: float
    budget: float

    @property
    def passed(self) -> bool:
        return self.ok and self.seconds <= self.budget

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        timing = f"{self.seconds:.1f}s/{self.budget:.0f}s"
        if self.ok and not self.passed:
            timing += " over budget"
        return f"[{verdict}] criterion {self.number:2d} {self.name} ({timing}): {self.detail}"

    def to_dict(self) -> dict:
        return {
            "criterion": self.number,
            "name": self.name,
            "passed": self.passed,
            "property_holds": self.ok,
            "detail": self.detail,
            "seconds": round(self.seconds, 3),
            "budget_seconds": self.budget,
        }


def _timed(number: int, name: str, budget: float):
    def deco(fn):
        @functools.wraps(fn)
        def run(*args, **kw) -> CriterionResult:
            t0 = time.perf_counter()
            ok, detail = fn(*args, **kw)
            return CriterionResult(number, name, bool(ok), detail, time.perf_counter() - t0, budget)
        run.number = number
        return run
    return deco


@_timed(1, "line field", 30)
def criterion_line_field(seed: int = 0, frames: int = 50, tol: float = 1e-8):
    sf = line_field(engel_frame())
    exact = sf.alpha1.is_zero() and sf.alpha2.terms == ONE.terms
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for _ in range(frames):
        fr = random_frame(rng, degree=3)
        if not growth_check(fr).ok:
            continue
        sfr = line_field(fr)
        x0 = fr.box.sample(rng, 1)[0] * 0.5
        path = flow(sfr, x0, 1, T=0.5, steps=10, on_exit="truncate")
        rep = verify_singularity(fr, path, adjoint_certificate(fr, path), tol, raise_on_fail=False)
        worst = max(worst, rep.max_residual)
        checked += 1
    ok = exact and checked == frames and worst <= tol
    return ok, f"ENGEL alpha=(0,1) exact: {exact}; {checked} frames, worst residual {worst:.2e}"


@_timed(2, "vanishing on degenerate set", 60)
def criterion_vanishing(tol: float = 1e-9):
    fr = cubic_frame()
    pts = fr.box.grid(17)
    sf = line_field(fr)
    X, _, _ = sf.evaluate(pts)
    zero = np.linalg.norm(X, axis=1) <= tol
    hc = hc_mask(fr, pts, tol)
    bad = int(np.sum(zero != hc))
    return bad == 0, f"{len(pts)} grid points, {int(zero.sum())} zeros of X, {bad} disagreements"


def _fd_divergence(sf, pts, h: float = 1e-4):
    out = np.zeros(len(pts))
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        out += (sf.X(pts + e)[:, i] - sf.X(pts - e)[:, i]) / (2 * h)
    return out


def divergence_frames(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    frames = [Frame(x1 + 2.0, x1 * x1 * x2, DomainBox.cube(1.0)), contracting_frame()]
    return frames + [random_frame(rng, degree=3) for _ in range(3)]


@_timed(3, "divergence identity and bound", 30)
def criterion_divergence(seed: int = 0, points: int = 1000, audit: int = 10_000, tol: float = 1e-6):
    worst_cf = worst_fd = 0.0
    min_margin = np.inf
    rng = np.random.default_rng(seed + 1)
    frames = divergence_frames(seed)
    for fr in frames:
        sf = line_field(fr)
        pts = fr.box.sample(rng, points)
        direct = sf.divX(pts)
        worst_cf = max(worst_cf, float(np.max(np.abs(direct - divergence_closed_form(sf, pts)))))
        worst_fd = max(worst_fd, float(np.max(np.abs(direct - _fd_divergence(sf, pts)))))
        C = divergence_bound_report(sf).C
        fresh = fr.box.sample(rng, audit)
        _, div, nrm = sf.evaluate(fresh)
        min_margin = min(min_margin, float(np.min(div + C * nrm)))
    ok = worst_cf <= tol and worst_fd <= tol and min_margin >= 0.0
    return ok, (f"{len(frames)} frames: closed-form gap {worst_cf:.1e}, FD gap {worst_fd:.1e}, "
                f"min div+C|X| {min_margin:.3g}")


@functools.lru_cache(maxsize=None)
def scenario_volume(name: str, samples: int = 100_000, seed: int = 0):
    """Volume report of a shipped scenario's contraction block (memoized)."""
    sc = load_scenario(name)
    block = sc["contract"]
    sf = line_field(scenario_frame(sc))
    A = SampleCloud.uniform(region_box(block["region"]), samples, np.random.default_rng(seed))
    return sf, volume_evolution(sf, A, block.get("sign", 1), block.get("T", 1.0), block.get("points", 8),
                                seed=seed + 1)


@_timed(4, "volume formula", 300)
def criterion_volume(samples: int = 100_000, k: float = 3.0):
    parts, ok = [], True
    for name in ("engel", "cubic"):
        _, rep = scenario_volume(name, samples)
        gap = float(np.max(rep.estimator_gap()))
        good = len(rep.times) - 1 == 8 and rep.estimators_agree(k) and rep.inside_box
        ok &= good
        parts.append(f"{name} max gap {gap:.2f} sigma over {len(rep.times) - 1} times")
    return ok, "; ".join(parts)


@_timed(5, "contraction bound", 300)
def criterion_contraction(samples: int = 100_000):
    parts, ok = [], True
    for name in SHIPPED:
        sf, rep = scenario_volume(name, samples)
        good = contraction_audit(rep, raise_on_fail=False)
        ok &= good
        parts.append(f"{name} C={rep.C:.3g} {'pass' if good else 'FAIL'}")
    sf, rep = scenario_volume("contracting", samples)
    negative_div = float(sf.divX(rep_region_points("contracting")).min()) < 0
    control = contraction_audit(rep, C=0.0, raise_on_fail=False)
    ok &= negative_div and not control
    parts.append(f"C=0 control on contracting {'fails as expected' if not control else 'PASSES (unexpected)'}")
    return ok, "; ".join(parts)


def rep_region_points(name: str, n: int = 1000):
    sc = load_scenario(name)
    return region_box(sc["contract"]["region"]).sample(np.random.default_rng(0), n)


@_timed(6, "rank dichotomy", 10)
def criterion_rank(trials: int = 10):
    fr = engel_frame()
    origin = np.zeros(4)
    ab = variational_verdict(fr, origin, Control.constant((0.0, 1.0)), trials)
    reg = variational_verdict(fr, origin, Control.constant((1 / np.sqrt(2), 1 / np.sqrt(2))), trials)
    ab_ok = all(r <= 3 for r in ab.ranks) and len(ab.ranks) == trials and max(ab.min_singular_values) <= 1e-9
    reg_ok = all(r == 4 for r in reg.ranks) and min(reg.min_singular_values) >= 1e-4
    return ab_ok and reg_ok, (f"abnormal ranks {sorted(set(ab.ranks))} max sigma_min {max(ab.min_singular_values):.1e}; "
                              f"regular ranks {sorted(set(reg.ranks))} min sigma_min {min(reg.min_singular_values):.2e}")


@_timed(7, "distance sandwich", 60)
def criterion_distance(tol: float = 1e-3):
    fr = engel_frame()
    opts = DistanceOptions()
    cases = [((t, 0, 0, 0), t) for t in (0.25, 0.5, 1.0)] + [((0, 1, 0, 0), 1.0)]
    worst = 0.0
    for y, expect in cases:
        res = sr_distance(fr, np.zeros(4), np.array(y, float), opts)
        worst = max(worst, abs(res.d - expect))
        if res.lower_bound > res.d + 1e-12:
            return False, f"lower bound {res.lower_bound} exceeds upper bound {res.d} for y={y}"
    return worst <= tol, f"{len(cases)} targets, worst |d - exact| {worst:.1e}"


def _sq_cost(P, Q):
    return np.sum((P[:, None, :] - Q[None, :, :]) ** 2, axis=-1)


def _l1_cost(P, Q):
    return np.sum(np.abs(P[:, None, :] - Q[None, :, :]), axis=-1)


def _brute_force(C):
    n = C.shape[0]
    best = min(itertools.permutations(range(n)), key=lambda s: sum(C[i, s[i]] for i in range(n)))
    return best, sum(C[i, best[i]] for i in range(n)) / n


@_timed(8, "transport duality and graph", 30)
def criterion_transport(seed: int = 0, instances: int = 20, n: int = 8):
    rng = np.random.default_rng(seed)
    worst_gap = 0.0
    fails = []
    for k in range(instances):
        P, Q = rng.random((n, 4)), rng.random((n, 4))
        mu, nu = DiscreteMeasure.uniform(P), DiscreteMeasure.uniform(Q)
        C = (_sq_cost if k % 2 == 0 else _l1_cost)(P, Q)
        plan, cost = solve_kantorovich(mu, nu, C)
        pot = dual_potentials(mu, nu, C, plan)
        gap = abs(cost - pot.dual_value(mu, nu))
        worst_gap = max(worst_gap, gap)
        M = plan.matrix * n
        perm = np.allclose(M, np.round(M), atol=1e-12) and np.all(np.round(M).sum(0) == 1) and np.all(np.round(M).sum(1) == 1)
        if gap > 1e-8 or pot.max_violation(C) > 1e-10 or not contact_set(pot, C).covers(plan) or not perm:
            fails.append(k)
    brute_bad = 0
    for _ in range(instances):
        P, Q = rng.random((3, 4)), rng.random((3, 4))
        C = _sq_cost(P, Q)
        plan, cost = solve_kantorovich(DiscreteMeasure.uniform(P), DiscreteMeasure.uniform(Q), C)
        sigma, best = _brute_force(C)
        got = tuple(int(j) for j in np.argmax(plan.matrix, axis=1))
        if got != sigma or abs(cost - best) > 1e-14:
            brute_bad += 1
    ok = not fails and brute_bad == 0
    return ok, (f"{instances} {n}x{n} instances, worst gap {worst_gap:.1e}, failing {fails}; "
                f"{instances} 3x3 brute-force mismatches {brute_bad}")


def static_instances(seed: int = 0) -> list:
    """``(mu, nu, C, expected_static)`` with coinciding support points of equal mass.

    Half of each instance is shared between source and target; the other
    half is displaced far away, so the shared points must stay put.
    """
    rng = np.random.default_rng(seed)
    out = []
    for k in range(6):
        n, shared = 6, 2 + k % 3
        common = rng.random((shared, 4))
        P = np.vstack([common, rng.random((n - shared, 4)) + 5.0])
        Q = np.vstack([common, P[shared:] + 0.1 * rng.standard_normal((n - shared, 4))])
        wP = rng.random(n) + 0.5
        wP /= wP.sum()
        wQ = wP.copy()
        if k % 2:
            wQ[shared:] = wQ[shared:][rng.permutation(n - shared)]
        out.append((DiscreteMeasure(P, wP), DiscreteMeasure(Q, wQ), _sq_cost(P, Q), list(range(shared))))
    P = rng.random((5, 4))
    mu = DiscreteMeasure.uniform(P)
    out.append((mu, mu, _sq_cost(P, P), list(range(5))))
    # one static point whose other targets are priced higher
    P = np.array([[0.0, 0, 0, 0], [1.0, 0, 0, 0]])
    Q = np.array([[0.0, 0, 0, 0], [0.0, 1.0, 0, 0]])
    C = np.array([[0.0, 3.0], [2.0, 1.0]])
    out.append((DiscreteMeasure.uniform(P), DiscreteMeasure.uniform(Q), C, [0]))
    return out


@_timed(9, "static points", 10)
def criterion_static(seed: int = 0, tol: float = 1e-9):
    total_static, bad = 0, []
    for k, (mu, nu, C, expected) in enumerate(static_instances(seed)):
        plan, _ = solve_kantorovich(mu, nu, C)
        gamma = contact_set(dual_potentials(mu, nu, C, plan), C)
        cls = Classification(static_status(mu, nu, gamma))
        rep = static_fixed_check(cls, plan, mu, nu, tol)
        total_static += len(cls.static)
        if not rep.ok or cls.static != expected:
            bad.append(k)
    return not bad and total_static > 0, f"{total_static} static points, failing instances {bad}"


@_timed(10, "semiconvexity predicates", 10)
def criterion_semiconvex(seed: int = 0, h: float = 0.05, radius: float = 0.1):
    rng = np.random.default_rng(seed)
    convex_ok = True
    for _ in range(5):
        G = rng.standard_normal((4, 4))
        Q = G @ G.T
        b = rng.standard_normal(4)
        x = 0.5 * rng.standard_normal(4)
        convex_ok &= semiconvex_support_test(lambda z: 0.5 * z @ Q @ z + b @ z, x, 0.0, radius, h)[0]
    sup_ok = True
    for _ in range(5):
        Aff, c = rng.standard_normal((5, 4)), rng.standard_normal(5)
        x = 0.5 * rng.standard_normal(4)
        sup_ok &= semiconvex_support_test(lambda z: float(np.max(Aff @ z + c)), x, 0.0, radius, h)[0]
    kink = np.zeros(4)
    sigmas = (0.0, 1.0, 10.0, 100.0, 1000.0)
    passing = [s for s in sigmas if semiconvex_support_test(lambda z: -np.linalg.norm(z - kink), kink, s, radius, h)[0]]
    ok = convex_ok and sup_ok and not passing
    return ok, (f"convex quadratics {'pass' if convex_ok else 'FAIL'}, sups of affine {'pass' if sup_ok else 'FAIL'}; "
                f"-|z-x| at kink passes for sigma in {passing} (expected none)")


CRITERIA = (
    criterion_line_field,
    criterion_vanishing,
    criterion_divergence,
    criterion_volume,
    criterion_contraction,
    criterion_rank,
    criterion_distance,
    criterion_transport,
    criterion_static,
    criterion_semiconvex,
)


def run_all(only=None, echo=None) -> list:
    """Run the criteria (all, or the numbers in ``only``) and return their results."""
    out = []
    for fn in CRITERIA:
        if only and fn.number not in only:
            continue
        res = fn()
        if echo is not None:
            echo(res.line())
        out.append(res)
    return out


def summary(results: list) -> dict:
    return {
        "version": __version__,
        "passed": sum(r.passed for r in results),
        "total": len(results),
        "criteria": [r.to_dict() for r in results],
    }
