import json

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from srtransport.errors import DegenerateFrame, InputError
from srtransport.structure import (
    DomainBox,
    Frame,
    Poly4,
    PolyBundle,
    VectorField4,
    contracting_frame,
    cubic_frame,
    ef_coefficients,
    engel_frame,
    growth_check,
    hc_mask,
    hc_membership,
    lie_bracket,
    parse_structure,
    random_frame,
    random_poly,
    structure_hash,
    structure_to_dict,
    x1,
    x2,
    x3,
    x4,
)

S = sp.symbols("x1:5")


def to_sympy(p: Poly4):
    return sum(sp.Float(c) * sp.prod([s**e for s, e in zip(S, exps)]) for exps, c in p.terms.items())


def sym_bracket(V, W):
    return [sum(V[j] * sp.diff(W[i], S[j]) - W[j] * sp.diff(V[i], S[j]) for j in range(4)) for i in range(4)]


def sym_equal(p: Poly4, expr, tol=1e-12):
    diff = sp.Poly(sp.expand(to_sympy(p) - expr), *S)
    return all(abs(float(c)) <= tol for c in diff.coeffs())


def test_engel_brackets():
    fr = engel_frame()
    assert fr.X12 == VectorField4([Poly4(), Poly4(), Poly4.const(1), x1])
    assert fr.X112 == VectorField4([Poly4(), Poly4(), Poly4(), Poly4.const(1)])
    assert fr.X212.is_zero()
    E, F = ef_coefficients(fr)
    assert E.is_zero() and F.is_zero()


def test_brackets_match_sympy_on_random_frames():
    rng = np.random.default_rng(3)
    for _ in range(5):
        fr = random_frame(rng, degree=3)
        X1 = [sp.Integer(1), 0, 0, 0]
        X2 = [0, sp.Integer(1), to_sympy(fr.A), to_sympy(fr.B)]
        X12 = sym_bracket(X1, X2)
        X112 = sym_bracket(X1, X12)
        X212 = sym_bracket(X2, X12)
        for mine, ref in ((fr.X12, X12), (fr.X112, X112), (fr.X212, X212)):
            assert all(sym_equal(c, r, 1e-10) for c, r in zip(mine, ref))
        E, F = ef_coefficients(fr)
        assert sym_equal(E, sp.expand(X212[2]), 1e-10)
        assert sym_equal(F, sp.expand(X212[3]), 1e-10)


def test_poly_arithmetic_and_partials():
    p = 3 * x1**2 * x2 - x4 + 0.5
    assert p.degree == 3
    assert p.partial(1) == 6 * x1 * x2
    assert p.d(1, 1, 2) == Poly4.const(6.0)
    assert p.partial(3).is_zero()
    assert p.depends_on(4) and not p.depends_on(3)
    assert p(np.array([1.0, 2.0, 0.0, 1.0])) == pytest.approx(5.5)
    assert (p - p).is_zero()


def test_bundle_batch_matches_pointwise():
    rng = np.random.default_rng(0)
    polys = [random_poly(rng, 3) for _ in range(4)]
    pts = rng.uniform(-1, 1, size=(50, 4))
    batch = PolyBundle(polys)(pts)
    for k, z in enumerate(pts):
        assert np.allclose(batch[k], [p(z) for p in polys], atol=1e-13)


def test_poly_bound_dominates_samples():
    rng = np.random.default_rng(1)
    box = DomainBox.cube(0.7)
    p = random_poly(rng, 3)
    vals = np.abs(p(box.sample(rng, 2000)))
    assert vals.max() <= p.bound(box) + 1e-12


polys = st.dictionaries(
    st.tuples(*[st.integers(0, 2)] * 4),
    st.integers(-3, 3).map(float),
    max_size=4,
).map(Poly4)
fields = st.lists(polys, min_size=4, max_size=4).map(VectorField4)


@settings(max_examples=30, deadline=None)
@given(fields, fields)
def test_bracket_antisymmetry(V, W):
    assert lie_bracket(V, W) == -lie_bracket(W, V)


@settings(max_examples=15, deadline=None)
@given(fields, fields, fields)
def test_jacobi_identity(U, V, W):
    total = lie_bracket(U, lie_bracket(V, W)) + lie_bracket(V, lie_bracket(W, U)) + lie_bracket(W, lie_bracket(U, V))
    assert all(all(abs(c) < 1e-9 for c in comp.terms.values()) for comp in total)


@settings(max_examples=30, deadline=None)
@given(polys, polys, st.integers(1, 4))
def test_leibniz_rule(p, q, axis):
    assert p.partial(axis) * q + p * q.partial(axis) == (p * q).partial(axis)


def test_growth_check_engel_certified():
    rep = growth_check(engel_frame())
    assert rep.ok and rep.certified and rep.chart_ok
    assert rep.grid_points == 17**4


def test_growth_check_detects_degenerate_frame():
    fr = Frame(x2, x3)  # no x1 dependence: [X1, X2] = 0
    rep = growth_check(fr)
    assert not rep.ok and rep.witness is not None
    with pytest.raises(DegenerateFrame):
        growth_check(fr, strict=True)


def test_chart_failure_reported():
    fr = Frame(x1 * x1, x1 * x1 * 0.5 + x1)  # A_x1 = 0 on x1 = 0, B_x1 does not vanish there
    rep = growth_check(fr)
    assert rep.ok and not rep.chart_ok
    with pytest.raises(DegenerateFrame):
        rep.require(chart=True)


def test_hc_membership_cubic():
    fr = cubic_frame()
    assert hc_membership(fr, [0.0, 0.3, -1.0, 0.2])
    assert not hc_membership(fr, [0.5, 0.3, -1.0, 0.2])
    assert not hc_mask(engel_frame(), engel_frame().box.grid(5)).any()


def test_parse_roundtrip_and_hash():
    fr = contracting_frame()
    text = json.dumps(structure_to_dict(fr))
    back = parse_structure(text)
    assert back.A == fr.A and back.B == fr.B and back.box == fr.box
    assert structure_hash(back) == structure_hash(fr)
    assert structure_hash(engel_frame()) != structure_hash(cubic_frame())


def test_parse_fraction_coefficients():
    fr = parse_structure('{"A": [[1,0,0,0,1]], "B": [[3,0,0,0,"1/6"]]}')
    assert fr.B == cubic_frame().B


def test_parse_negative_exponent_names_field():
    with pytest.raises(InputError, match=r"field 'B'\[0\].*e3=-1"):
        parse_structure('{"A": [[1,0,0,0,1]], "B": [[2,0,-1,0,0.5]]}')


def test_parse_reports_json_position():
    with pytest.raises(InputError, match="line 2, column"):
        parse_structure('{"A": [[1,0,0,0,1]],\n "B": [[2,0,0,0,0.5]')


def test_parse_missing_field():
    with pytest.raises(InputError, match="'B'"):
        parse_structure('{"A": [[1,0,0,0,1]]}')


def test_domain_box():
    box = DomainBox((0.0, 1.0, 0.0, 0.0), (1.0, 0.5, 2.0, 1.0))
    assert box.volume == pytest.approx(2 * 1 * 4 * 2)
    assert box.contains([0.5, 1.2, -1.0, 0.0])
    assert not box.contains([0.5, 1.6, -1.0, 0.0])
    assert box.grid(3).shape == (81, 4)
    with pytest.raises(ValueError):
        DomainBox((0, 0, 0, 0), (1, 0, 1, 1))
