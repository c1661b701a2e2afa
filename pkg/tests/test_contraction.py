import csv

import numpy as np
import pytest

from srtransport.contraction import (
    QuadraticPotential,
    SampleCloud,
    contraction_audit,
    disjoint_projection_experiment,
    hc_attraction_experiment,
    jacobian_trace,
    mixed_experiment,
    path_length_bound,
    regular_contraction_audit,
    volume_evolution,
    volume_summary,
    write_volume_csv,
)
from srtransport.errors import AuditFailed, DegenerateSplit
from srtransport.singular import flow, line_field
from srtransport.structure import DomainBox, contracting_frame, cubic_frame, engel_frame

CONTRACT_BOX = DomainBox((-1.25, 0, 0, 0), (0.25, 0.5, 0.5, 0.5))


def test_jacobian_trace_engel_is_one():
    tr = jacobian_trace(line_field(engel_frame()), [0.3, 0, 0, 0], 1, 1.0, 20)
    assert np.allclose(tr.J, 1.0)


def test_jacobian_trace_matches_divergence_integral():
    # X = (x1^2/2) X1 + X2 and div X = 2 x1, so x1 = a / (1 - a t / 2) and J = (1 - a t / 2)^-4
    sf = line_field(contracting_frame())
    x0 = np.array([-1.0, 0.0, 0.2, 0.1])
    tr = jacobian_trace(sf, x0, 1, 0.5, 40)
    path = flow(sf, x0, 1, 0.5, 40)
    a, t = x0[0], path.times
    assert np.allclose(path.points[:, 0], a / (1 - a * t / 2), rtol=1e-9)
    assert np.allclose(tr.J, (1 - a * tr.times / 2) ** -4, rtol=1e-8)


def test_volume_estimators_engel_flat():
    sf = line_field(engel_frame())
    A = SampleCloud.uniform(DomainBox((0.25,) * 4, (0.25,) * 4), 5000, np.random.default_rng(0))
    rep = volume_evolution(sf, A, 1, 1.0, 4, seed=1)
    assert np.allclose(rep.vol_div, A.volume)
    assert rep.estimators_agree()
    assert contraction_audit(rep)


def test_contracting_volume_and_negative_control():
    sf = line_field(contracting_frame())
    A = SampleCloud.uniform(CONTRACT_BOX, 20000, np.random.default_rng(0))
    rep = volume_evolution(sf, A, 1, 1.0, 4, seed=1)
    # vol(phi_t A) = vol(A) * mean J(t, z) with J = (1 - z1 t / 2)^-4
    exact = A.volume * np.array([np.mean((1 - A.samples[:, 0] * t / 2) ** -4) for t in rep.times])
    assert np.allclose(rep.vol_div, exact, rtol=1e-6)
    assert rep.estimators_agree()
    assert rep.vol_div[-1] < 0.5 * A.volume
    assert contraction_audit(rep)
    assert not contraction_audit(rep, C=0.0, raise_on_fail=False)
    with pytest.raises(AuditFailed) as err:
        contraction_audit(rep, C=0.0)
    assert err.value.time > 0


def test_grid_mode_volume():
    sf = line_field(contracting_frame())
    A = SampleCloud.grid(CONTRACT_BOX, 8)
    rep = volume_evolution(sf, A, 1, 0.5, 2, n_mc=4096)
    assert rep.vol_div[0] == pytest.approx(A.volume)
    assert rep.mode == "grid"


def test_path_length_bound_dominates_lengths():
    sf = line_field(contracting_frame())
    A = SampleCloud.uniform(CONTRACT_BOX, 500, np.random.default_rng(0))
    rep = volume_evolution(sf, A, 1, 1.0, 4, n_mc=500)
    assert rep.l_A_t[-1] <= path_length_bound(sf, 1.0)


def test_hc_attraction():
    sf = line_field(cubic_frame())
    A = SampleCloud.uniform(DomainBox((0.5, 0, 0, 0), (0.1, 0.3, 0.3, 0.3)), 4000, np.random.default_rng(0))
    rep = hc_attraction_experiment(sf, A, 1.0, 4)
    assert rep.ok
    finite = hc_attraction_experiment(sf, SampleCloud.finite([[0.5, 0, 0, 0], [0.2, 0.1, 0, 0]]), 1.0, 4)
    assert np.all(finite.vol_mc == 0.0)


def test_disjoint_split_engel():
    sf = line_field(engel_frame())
    A = SampleCloud.uniform(DomainBox((0.25, 0.5, 0, 0), (0.25, 0.5, 0.25, 0.25)), 4000, np.random.default_rng(0))
    t1 = DomainBox.from_bounds([-2, 1, -2, -2], [2, 1.5, 2, 2])
    t2 = DomainBox.from_bounds([-2, 1.5, -2, -2], [2, 2, 2, 2])
    rep = disjoint_projection_experiment(sf, A, t1, t2, 1.0, 4)
    assert rep.ok and all(rep.disjoint)
    assert sum(rep.fractions) == pytest.approx(1.0)


def test_split_input_errors():
    sf = line_field(engel_frame())
    A = SampleCloud.uniform(DomainBox((0.25, 0.5, 0, 0), (0.25, 0.5, 0.25, 0.25)), 200, np.random.default_rng(0))
    t1 = DomainBox.from_bounds([-2, 1, -2, -2], [2, 1.5, 2, 2])
    with pytest.raises(ValueError):
        disjoint_projection_experiment(sf, A, t1, t1, 1.0, 2)
    far = DomainBox.from_bounds([1.9, 1.9, 1.9, 1.9], [2, 2, 2, 2])
    with pytest.raises(DegenerateSplit):
        disjoint_projection_experiment(sf, A, t1, far, 1.0, 2)


def test_regular_audit_quadratic_potential():
    fr = engel_frame()
    A = SampleCloud.uniform(DomainBox((0, 0, 0, 0), (0.2,) * 4), 60, np.random.default_rng(0))
    rep = regular_contraction_audit(fr, QuadraticPotential(np.diag([1.0, 0.5, 0.2, 0.1])), A, 1.0, 2)
    assert rep.ok and rep.hessian_min_eig == pytest.approx(0.1, abs=1e-4)
    zero = regular_contraction_audit(fr, QuadraticPotential(np.zeros((4, 4))), A, 1.0, 2)
    assert np.allclose(zero.ratio, 1.0)


def test_mixed_experiment_runs():
    sf = line_field(contracting_frame())
    A = SampleCloud.uniform(CONTRACT_BOX, 80, np.random.default_rng(0))
    rep = mixed_experiment(sf, QuadraticPotential(np.diag([0.2, 0.1, 0.04, 0.02])), A, 0.5, 2)
    assert rep.combined[0] == pytest.approx(2.0)
    assert len(rep.union_ratio) == 3 and rep.union_ratio[0] == pytest.approx(1.0)


def test_volume_outputs(tmp_path):
    sf = line_field(engel_frame())
    A = SampleCloud.uniform(DomainBox((0.25,) * 4, (0.25,) * 4), 500, np.random.default_rng(0))
    rep = volume_evolution(sf, A, 1, 1.0, 2, seed=1)
    out = tmp_path / "v.csv"
    write_volume_csv(out, rep)
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["t", "vol_mc", "stderr", "vol_div", "lower_bound", "l_A_t"] and len(rows) == 4
    summ = volume_summary(rep, True)
    assert summ["samples"] == 500 and summ["contraction_audit"]
