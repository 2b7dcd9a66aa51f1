import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceteb import BoundaryClass, CaptivitySet, DomainError, GenericSystem, InputBox, NoBnupError, compute_bnup, minmax_hamiltonian, \
    nup_membership
from ceteb.geometry import maxmin_hamiltonian

from conftest import chauffeur


def cap(s, beta=0.25):
    return CaptivitySet.for_system(s, beta)


def test_hamiltonian_top_of_circle():
    assert minmax_hamiltonian(chauffeur(0.10), [0, 0.25], [0, 1]) == pytest.approx(-0.90, abs=1e-15)


def test_hamiltonian_bottom_of_circle():
    assert minmax_hamiltonian(chauffeur(0.10), [0, -0.25], [0, -1]) == pytest.approx(1.10, abs=1e-15)


def test_hamiltonian_static_planner_sign():
    s = chauffeur(0.0)
    for phi in np.linspace(-math.pi, math.pi, 41):
        x = 0.25 * np.array([math.cos(phi), math.sin(phi)])
        h = minmax_hamiltonian(s, x, x / 0.25)
        # nu parallel to x: the rotation term drops out, leaving -v_hf nu_y
        assert h == pytest.approx(-math.sin(phi), abs=1e-15)


def test_hamiltonian_matches_brute_force_minmax():
    s = chauffeur(0.37)
    rng = np.random.default_rng(2)
    ulf = np.linspace(-math.pi, math.pi, 2001)
    uhf = np.linspace(-1, 1, 201)
    for _ in range(10):
        x, nu = rng.normal(size=2), rng.normal(size=2)
        A, B = np.meshgrid(ulf, uhf)
        vals = s.vector_field(np.broadcast_to(x, A.shape + (2,)), A, B) @ nu
        assert minmax_hamiltonian(s, x, nu) == pytest.approx(vals.max(axis=1).min(), abs=1e-5)


def test_zero_normal_rejected():
    with pytest.raises(DomainError):
        minmax_hamiltonian(chauffeur(), [0, 0.25], [0, 0])


@given(st.floats(0, 0.99), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_minmax_equals_maxmin(v, x, y, a, b):
    if a == 0 and b == 0:
        return
    s = chauffeur(v)
    assert minmax_hamiltonian(s, [x, y], [a, b]) == pytest.approx(maxmin_hamiltonian(s, [x, y], [a, b]), abs=1e-9)


def test_nup_membership_examples():
    s = chauffeur(0.10)
    c = cap(s)
    assert nup_membership(s, c, [0, 0.25]) is BoundaryClass.NUP
    assert nup_membership(s, c, [0, -0.25]) is BoundaryClass.ESCAPABLE
    assert nup_membership(s, c, [0.25 * math.sqrt(0.99), 0.025]) is BoundaryClass.NUP


def test_nup_membership_needs_boundary_state():
    with pytest.raises(DomainError):
        nup_membership(chauffeur(), cap(chauffeur()), [0, 0.2])


def test_nup_partition_matches_threshold():
    s = chauffeur(0.3)
    c = cap(s, 0.4)
    thr = 0.4 * 0.3
    for phi in np.linspace(-math.pi, math.pi, 721):
        x = c.boundary_point(phi)
        if abs(x[1] - thr) < 1e-9:
            continue
        expect = BoundaryClass.NUP if x[1] >= thr else BoundaryClass.ESCAPABLE
        assert nup_membership(s, c, x) is expect


def test_bnup_reference_point():
    s = chauffeur(0.10)
    pts = sorted((p.state for p in compute_bnup(s, cap(s))), key=lambda p: -p[0])
    assert np.allclose(pts, [[0.25 * math.sqrt(0.99), 0.025], [-0.25 * math.sqrt(0.99), 0.025]], atol=1e-12)


def test_bnup_static_planner():
    s = chauffeur(0.0)
    pts = sorted((p.state for p in compute_bnup(s, cap(s))), key=lambda p: -p[0])
    assert np.allclose(pts, [[0.25, 0], [-0.25, 0]], atol=1e-12)


def test_bnup_points_merge_near_tracker_speed():
    s = chauffeur(1 - 1e-10)
    pts = compute_bnup(s, cap(s))
    assert all(np.linalg.norm(p.state - [0, 0.25]) < 1e-4 for p in pts)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 0.98), st.floats(0.01, 5))
def test_bnup_invariants(v, beta):
    s = chauffeur(v)
    c = cap(s, beta)
    pts = compute_bnup(s, c)
    assert len(pts) == 2
    closed = s.bnup_closed_form(beta)
    for p in pts:
        assert abs(np.linalg.norm(p.state) - beta) <= 1e-12 * max(1, beta)
        assert abs(minmax_hamiltonian(s, p.state, p.outward_normal)) <= 1e-10
        assert np.min(np.linalg.norm(closed - p.state, axis=1)) <= 1e-9


def test_no_bnup_raises():
    # radial drift pushes every boundary state outward: the Hamiltonian never vanishes
    g = GenericSystem(state_dim=2, f=lambda x, a, b, chi: np.array([x[0], x[1]]),
                      planner_box_spec=InputBox((0.0,), (1.0,)), tracker_box=InputBox((0.0,), (1.0,)),
                      projection_diag=(1, 1))
    with pytest.raises(NoBnupError):
        compute_bnup(g, CaptivitySet.for_system(g, 1.0))
