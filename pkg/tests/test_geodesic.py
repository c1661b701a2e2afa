import numpy as np
import pytest

from srtransport.errors import NotConverged
from srtransport.geodesic import (
    Control,
    DistanceCache,
    DistanceOptions,
    endpoint,
    endpoint_and_sensitivity,
    flow_variational_rank,
    hamiltonian,
    hamiltonian_exp,
    hamiltonian_flow,
    length_energy,
    reverse_control,
    sr_distance,
    variational_rank,
    variational_verdict,
)
from srtransport.singular import line_field
from srtransport.structure import DomainBox, contracting_frame, engel_frame, random_frame


def engel_constant_endpoint(a, b, t=1.0):
    # x1 = a t, x2 = b t, x3 = a b t^2 / 2, x4 = a^2 b t^3 / 6
    return np.array([a * t, b * t, a * b * t**2 / 2, a * a * b * t**3 / 6])


def test_endpoint_constant_control_closed_form():
    fr = engel_frame()
    for a, b in [(1.0, 0.0), (0.0, 1.0), (0.6, -0.8), (1.2, 0.7)]:
        e = endpoint(fr, np.zeros(4), Control.constant((a, b)))
        assert np.allclose(e, engel_constant_endpoint(a, b), atol=1e-14)


def test_sensitivity_matches_finite_differences():
    fr = contracting_frame()
    rng = np.random.default_rng(0)
    u = Control(1.0, 0.3 * rng.standard_normal((8, 2)))
    x = np.array([-0.5, 0.1, 0.0, 0.2])
    _, S = endpoint_and_sensitivity(fr, x, u)
    h = 1e-6
    z = u.values.ravel()
    for k in range(z.size):
        dz = np.zeros_like(z)
        dz[k] = h
        up = endpoint(fr, x, Control(1.0, (z + dz).reshape(-1, 2)))
        dn = endpoint(fr, x, Control(1.0, (z - dz).reshape(-1, 2)))
        assert np.allclose((up - dn) / (2 * h), S[:, k], atol=1e-7)


def test_reverse_control_returns_to_start():
    fr = engel_frame()
    rng = np.random.default_rng(1)
    u = Control(1.0, 0.5 * rng.standard_normal((32, 2)))
    x = np.array([0.1, -0.2, 0.3, 0.0])
    y = endpoint(fr, x, u)
    assert np.allclose(endpoint(fr, y, reverse_control(u)), x, atol=1e-9)


def test_length_energy():
    L, E = length_energy(engel_frame(), Control.constant((0.6, 0.8), T=2.0))
    assert L == pytest.approx(2.0) and E == pytest.approx(2.0)  # E = int |u|^2


def test_rank_abnormal_control():
    fr = engel_frame()
    v = variational_verdict(fr, np.zeros(4), Control.constant((0.0, 1.0)), trials=10)
    assert v.singular and v.ranks == [3] * 10
    assert max(v.min_singular_values) <= 1e-9


def test_rank_regular_control():
    fr = engel_frame()
    v = variational_verdict(fr, np.zeros(4), Control.constant((1 / np.sqrt(2), 1 / np.sqrt(2))), trials=10)
    assert not v.singular and v.ranks == [4] * 10
    assert min(v.min_singular_values) >= 1e-4


def test_rank_zero_control_is_two():
    fr = engel_frame()
    probes = [Control(1.0, np.eye(2)[[i % 2] * 8] * (i + 1)) for i in range(4)]
    rep = variational_rank(fr, np.zeros(4), Control.zero(), probes)
    assert rep.rank == 2


def test_flow_rank_along_singular_field():
    rng = np.random.default_rng(2)
    for _ in range(5):
        sf = line_field(random_frame(rng))
        rep = flow_variational_rank(sf, sf.frame.box.sample(rng, 1)[0] * 0.3, 1, 0.5, rng=rng)
        assert rep.rank <= 3


def test_hamiltonian_flow_conserves_energy():
    fr = contracting_frame()
    x = np.array([-0.5, 0.0, 0.1, 0.0])
    p0 = np.array([0.4, -0.3, 0.2, 0.5])
    xs, ps = hamiltonian_flow(fr, x, p0, 1.0, 200, record=True)
    assert xs.shape == (201, 4)
    H = hamiltonian(fr, xs, ps)
    assert np.ptp(H) <= 1e-9


def test_distance_bounded_by_normal_geodesic_length():
    fr = engel_frame(DomainBox.cube(2.0))
    x = np.zeros(4)
    p0 = np.array([0.5, 0.4, 0.6, 0.3])
    y = hamiltonian_exp(fr, x, p0, 1.0)
    res = sr_distance(fr, x, y)
    length = np.sqrt(2 * hamiltonian(fr, x, p0))
    assert res.lower_bound <= res.d <= length + 1e-3


def test_engel_axis_distances():
    fr = engel_frame()
    for t in (0.25, 0.5, 1.0):
        assert sr_distance(fr, np.zeros(4), np.array([t, 0, 0, 0])).d == pytest.approx(t, abs=1e-6)
    assert sr_distance(fr, np.zeros(4), np.array([0, 1.0, 0, 0])).d == pytest.approx(1.0, abs=1e-6)


def test_distance_symmetry():
    fr = engel_frame()
    x = np.array([0.1, 0.0, 0.0, 0.0])
    y = np.array([0.2, 0.3, 0.05, 0.0])
    r1 = sr_distance(fr, x, y)
    r2 = sr_distance(fr, y, x)
    assert r1.d == pytest.approx(r2.d, rel=1e-5)
    # the reversed optimal control is feasible for the swapped pair
    assert np.allclose(endpoint(fr, y, reverse_control(r1.control)), x, atol=1e-6)


def test_distance_to_self_is_zero():
    assert sr_distance(engel_frame(), np.ones(4) * 0.1, np.ones(4) * 0.1).d == 0.0


def test_distance_not_converged():
    opts = DistanceOptions(starts=1, endpoint_tol=1e-30, max_nfev=5)
    with pytest.raises(NotConverged):
        sr_distance(engel_frame(), np.zeros(4), np.array([0.2, 0.3, 0.1, 0.05]), opts)
    res = sr_distance(engel_frame(), np.zeros(4), np.array([0.2, 0.3, 0.1, 0.05]), opts, raise_on_fail=False)
    assert not res.converged


def test_distance_cache_roundtrip(tmp_path):
    cache = DistanceCache(seed=4)
    cache.put(np.zeros(4), np.ones(4), 1.5, True)
    path = tmp_path / "cache.csv"
    cache.save(path)
    back = DistanceCache.load(path)
    assert back.seed == 4
    assert back.get(np.zeros(4), np.ones(4))[0] == pytest.approx(1.5)
    assert back.get(np.ones(4), np.zeros(4)) is None
