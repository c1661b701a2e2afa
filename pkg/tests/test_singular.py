import csv

import numpy as np
import pytest

from srtransport.errors import CertificateFailed, ChartDegenerate, LeftDomain
from srtransport.singular import (
    AdjointPath,
    adjoint_certificate,
    divergence,
    divergence_bound_report,
    divergence_closed_form,
    flow,
    horizontal_path,
    kernel_residual,
    line_field,
    verify_singularity,
    write_flow_csv,
)
from srtransport.structure import (
    ONE,
    DomainBox,
    Frame,
    contracting_frame,
    cubic_frame,
    engel_frame,
    hc_mask,
    random_frame,
    x1,
    x2,
)


def fd_divergence(sf, pts, h=1e-4):
    out = np.zeros(len(pts))
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        out += (sf.X(pts + e)[:, i] - sf.X(pts - e)[:, i]) / (2 * h)
    return out


def test_engel_line_field():
    sf = line_field(engel_frame())
    assert sf.alpha1.is_zero()
    assert sf.alpha2 == ONE
    assert sf.X == engel_frame().X2
    assert sf.divX.is_zero()


def test_cubic_line_field_vanishes_on_slab():
    fr = cubic_frame()
    sf = line_field(fr)
    assert sf.alpha1.is_zero() and sf.alpha2 == x1
    rng = np.random.default_rng(0)
    zeros = fr.box.sample(rng, 100)
    zeros[:, 0] = 0.0
    X, _, _ = sf.evaluate(zeros)
    assert np.all(X == 0.0)
    assert hc_mask(fr, zeros).all()


def test_trivial_field_identically_zero():
    # E = F = 0 and A_11 = B_11 = 0
    sf = line_field(Frame(x1, x1 + x2))
    assert sf.is_identically_zero()
    assert divergence(sf, [0.1, 0.2, 0.3, 0.4]).direct == 0.0


def test_divergence_engel_cubic_zero():
    rng = np.random.default_rng(1)
    for fr in (engel_frame(), cubic_frame()):
        sf = line_field(fr)
        pts = fr.box.sample(rng, 200)
        assert np.allclose(fd_divergence(sf, pts), 0.0, atol=1e-7)
        assert np.allclose(divergence_closed_form(sf, pts), 0.0)


def test_divergence_three_way_agreement():
    rng = np.random.default_rng(2)
    frames = [contracting_frame(), Frame(x1 + 2.0, x1 * x1 * x2, DomainBox.cube(1.0))]
    frames += [random_frame(rng) for _ in range(3)]
    for fr in frames:
        sf = line_field(fr)
        pts = DomainBox.cube(min(1.0, fr.box.half[0])).sample(rng, 300)
        direct = sf.divX(pts)
        assert np.allclose(direct, divergence_closed_form(sf, pts), atol=1e-9, rtol=1e-9)
        assert np.allclose(direct, fd_divergence(sf, pts), atol=1e-6)
        v = divergence(sf, pts[0])
        assert v.agree


def test_contracting_divergence_is_2x1():
    sf = line_field(contracting_frame())
    assert sf.divX == 2 * x1


def test_closed_form_needs_chart():
    fr = Frame(x1 * x1 * 0.5 + x1, x1**3 / 6.0)  # A_x1 = 1 + x1 vanishes at x1 = -1
    sf = line_field(fr, check=False)
    with pytest.raises(ChartDegenerate):
        divergence_closed_form(sf, np.array([-1.0, 0.0, 0.0, 0.0]))


def test_divergence_bound_audit():
    fr = Frame(x1 + 2.0, x1 * x1 * x2, DomainBox.cube(1.0))
    sf = line_field(fr)
    rep = divergence_bound_report(sf)
    assert rep.ok and rep.c1 == 0.0 and rep.c2 == 0.0  # A_11 = E = div X2 = 0
    assert np.allclose(sf.divX(fr.box.sample(np.random.default_rng(8), 100)), 0.0)
    fr = contracting_frame()
    sf = line_field(fr)
    rep = divergence_bound_report(sf)
    assert rep.ok and rep.C > 0
    pts = fr.box.sample(np.random.default_rng(9), 10_000)
    _, div, nrm = sf.evaluate(pts)
    assert np.min(div + rep.C * nrm) >= 0.0
    assert np.min(div) < 0.0
    assert divergence_bound_report(line_field(engel_frame())).C == 0.0


def test_engel_flows_closed_form():
    sf = line_field(engel_frame())
    p = flow(sf, [0, 0, 0, 0], 1, 1.0, 10)
    assert np.allclose(p.points, np.c_[np.zeros(11), p.times, np.zeros(11), np.zeros(11)], atol=1e-15)
    p = flow(sf, [1, 0, 0, 0], 1, 1.0, 10)
    assert np.allclose(p.end, [1, 1, 1, 0.5], atol=1e-14)
    back = flow(sf, p.end, -1, 1.0, 10)
    assert np.allclose(back.end, [1, 0, 0, 0], atol=1e-14)


def test_cubic_equilibrium():
    sf = line_field(cubic_frame())
    p = flow(sf, np.zeros(4), 1, 2.0, 20)
    assert np.all(p.points == 0.0)
    adj = adjoint_certificate(cubic_frame(), p)
    assert verify_singularity(cubic_frame(), p, adj).max_residual == 0.0


def test_flow_leaving_box():
    sf = line_field(engel_frame())
    with pytest.raises(LeftDomain) as err:
        flow(sf, [0, 1.5, 0, 0], 1, 1.0, 10)
    assert err.value.time == pytest.approx(0.6)
    p = flow(sf, [0, 1.5, 0, 0], 1, 1.0, 10, on_exit="truncate")
    assert p.truncated and p.points[-1, 1] <= 2.0 + 1e-9


def test_flow_order_four_convergence():
    sf = line_field(contracting_frame())
    x0 = [-0.8, 0.1, 0.2, 0.3]
    ends = [flow(sf, x0, 1, 1.0, n).end for n in (8, 16, 32)]
    d1 = np.linalg.norm(ends[0] - ends[1])
    d2 = np.linalg.norm(ends[1] - ends[2])
    assert d1 <= 16.0 * d2 * 1.5 and d1 / d2 > 8.0


def test_adjoint_certificate_engel_paths():
    fr = engel_frame()
    sf = line_field(fr)
    p0 = adjoint_certificate(fr, flow(sf, [0, 0, 0, 0], 1, 1.0, 10)).p
    assert np.allclose(p0, [0, 0, 0, 1])
    path = flow(sf, [1, 0, 0, 0], 1, 1.0, 10)
    adj = adjoint_certificate(fr, path)
    assert np.allclose(adj.p, [0, 0.5, -1, 1], atol=1e-14)
    rep = verify_singularity(fr, path, adj, tol=1e-10)
    assert rep.ok and rep.max_residual <= 1e-10


def test_random_frames_certificates():
    rng = np.random.default_rng(5)
    for _ in range(10):
        fr = random_frame(rng)
        sf = line_field(fr)
        path = flow(sf, fr.box.sample(rng, 1)[0] * 0.5, 1, 0.5, 10, on_exit="truncate")
        rep = verify_singularity(fr, path, adjoint_certificate(fr, path), 1e-8)
        assert rep.ok


def test_regular_direction_fails_certificate():
    fr = engel_frame()
    t = np.linspace(0, 1, 11)
    path = horizontal_path(fr, t, np.c_[t, np.zeros((11, 3))])
    adj = AdjointPath(t, np.tile([0.0, 0.0, 0.0, 1.0], (11, 1)))
    with pytest.raises(CertificateFailed):
        verify_singularity(fr, path, adj)
    rep = verify_singularity(fr, path, adj, raise_on_fail=False)
    assert rep.residuals["order3"] == pytest.approx(1.0)


def test_certificate_failure_names_quantity():
    fr = engel_frame()
    path = flow(line_field(fr), [0, 0, 0, 0], 1, 1.0, 10)
    adj = adjoint_certificate(fr, path)
    adj = AdjointPath(adj.times, adj.p + [0.0, 0.0, 1e-3, 0.0])  # breaks p.[X1, X2] only
    with pytest.raises(CertificateFailed) as err:
        verify_singularity(fr, path, adj)
    assert err.value.quantity == "bracket"
    assert err.value.value == pytest.approx(1e-3)


def test_kernel_property():
    rng = np.random.default_rng(6)
    for _ in range(10):
        sf = line_field(random_frame(rng))
        for z in sf.frame.box.sample(rng, 10):
            assert kernel_residual(sf, z) <= 1e-9


def test_flow_csv(tmp_path):
    fr = engel_frame()
    path = flow(line_field(fr), [1, 0, 0, 0], 1, 1.0, 4)
    out = tmp_path / "flow.csv"
    write_flow_csv(out, fr, path, adjoint_certificate(fr, path))
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["t", "x1", "x2", "x3", "x4", "p1", "p2", "p3", "p4", "res_X1", "res_X2", "res_bracket"]
    assert len(rows) == 6
