import csv
import math

import numpy as np
import pytest

from ceteb import (
    BarrierOpen, CaptivitySet, Diverged, GenericSystem, InputBox, IntegrationDrift, Membership, assemble_barrier,
    build_barrier, build_teb, compute_bnup, integrate_surface, teb_membership,
)
from ceteb.analytic import chauffeur_bnup_surface, chauffeur_surface
from ceteb.barrier import JunctionKind, adjoint_rhs, surface_optimal_inputs

from conftest import OMEGA, chauffeur

BETA = 0.25


@pytest.fixture(scope="module")
def ref_barrier():
    s = chauffeur(0.10)
    cap = CaptivitySet.for_system(s, BETA)
    return s, cap, build_barrier(s, cap, close_on_nup=False)


def right_piece(bar):
    return next(p for p in bar.pieces if p.origin.state[0] > 0)


def left_piece(bar):
    return next(p for p in bar.pieces if p.origin.state[0] < 0)


def test_optimal_inputs_at_bnup_tie():
    x = np.array([0.24875, 0.025])
    u_lf, u_hf = surface_optimal_inputs(chauffeur(), x, x / np.linalg.norm(x))
    assert u_lf[0] == pytest.approx(math.atan2(0.24875, 0.025), abs=1e-12)
    assert u_lf[0] == pytest.approx(1.47063, abs=1e-5)
    assert u_hf[0] == 1.0


def test_optimal_inputs_by_hand():
    u_lf, u_hf = surface_optimal_inputs(chauffeur(), [1, 0], [0, 1])
    assert (u_lf[0], u_hf[0]) == (0.0, -1.0)
    u_lf, u_hf = surface_optimal_inputs(chauffeur(), [0, 0.3], [1, 0])
    assert (u_lf[0], u_hf[0]) == (math.pi / 2, 1.0)


def test_adjoint_rhs_examples():
    s = chauffeur()
    assert np.allclose(adjoint_rhs(s, [0.1, 0.2], [1, 0], [0.0], [1.0]), [0, OMEGA])
    assert np.array_equal(adjoint_rhs(s, [0.1, 0.2], [1, 0], [0.0], [0.0]), [0, 0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        xi = rng.normal(size=2)
        assert abs(xi @ adjoint_rhs(s, rng.normal(size=2), xi, [0.0], [rng.uniform(-1, 1)])) < 1e-14


def test_surface_matches_closed_form(ref_barrier):
    s, cap, bar = ref_barrier
    for side, piece in ((1, right_piece(bar)), (-1, left_piece(bar))):
        exact, switches = chauffeur_bnup_surface(s, BETA, piece.t_hat, side)
        err = max(np.max(np.abs(exact(t)[0] - x)) for t, x in zip(piece.t, piece.states))
        assert err <= 1e-8
        assert np.allclose(piece.switch_times, switches, atol=1e-12)


def test_closed_form_oracle_self_consistent():
    # the closed form satisfies the dynamics: compare its finite-difference velocity
    s = chauffeur(0.10)
    exact, _ = chauffeur_bnup_surface(s, BETA, -0.4)
    for t in np.linspace(-0.39, -0.01, 9):
        x, xi = exact(t)
        h = 1e-6
        v = (exact(t + h)[0] - exact(t - h)[0]) / (2 * h)
        u = np.sign(xi[0] * x[1] - xi[1] * x[0])
        assert np.allclose(v, s.vector_field(x, [math.atan2(xi[0], xi[1])], [u]), atol=1e-7)


def test_adjoint_stays_unit(ref_barrier):
    _, _, bar = ref_barrier
    for surf in bar.surfaces:
        assert np.max(np.abs(np.linalg.norm(surf.adjoints, axis=1) - 1)) <= 1e-10


def test_semipermeability_identity(ref_barrier):
    _, _, bar = ref_barrier
    for surf in bar.surfaces + bar.pieces:
        assert np.max(np.abs(surf.residuals())) <= 1e-8


def test_bnup_tangency(ref_barrier):
    s, cap, bar = ref_barrier
    for p in bar.pieces:
        x = p.states[-1]
        v = p.velocity_at(0.0)
        assert abs(x @ v / np.linalg.norm(x)) <= 1e-9


def test_solution_junction_on_axis(solved):
    bar = solved.barrier
    assert [j.kind for j in bar.junctions] == [JunctionKind.SURFACE, JunctionKind.SURFACE]
    assert np.allclose(bar.junction, [0, 0.25], atol=1e-6)
    assert all(p.t_hat < 0 for p in bar.pieces)


def test_mirror_symmetry(ref_barrier):
    _, _, bar = ref_barrier
    r, l = right_piece(bar), left_piece(bar)
    assert r.t_hat == pytest.approx(l.t_hat, abs=1e-12)
    assert np.max(np.abs(r.states * [-1, 1] - l.states)) <= 1e-9
    assert abs(bar.junction[0]) <= 1e-9


def test_step_halving_moves_junction_little():
    s = chauffeur(0.10)
    cap = CaptivitySet.for_system(s, BETA)
    a = build_barrier(s, cap, step=1e-4, close_on_nup=False).junction
    b = build_barrier(s, cap, step=5e-5, close_on_nup=False).junction
    assert np.linalg.norm(a - b) <= 1e-9


def test_containment_of_pieces(ref_barrier):
    _, cap, bar = ref_barrier
    for p in bar.pieces:
        assert np.max(p.projected_norms(cap.projection)) <= BETA * (1 + 1e-9)


def test_pieces_run_from_junction_to_bnup(ref_barrier):
    _, _, bar = ref_barrier
    for p in bar.pieces:
        assert np.allclose(p.states[0], bar.junction, atol=1e-12)
        assert np.allclose(p.states[-1], p.origin.state, atol=1e-15)


def test_short_horizon_is_open():
    s = chauffeur(0.10)
    cap = CaptivitySet.for_system(s, BETA)
    surfaces = [integrate_surface(s, cap, a, 0.1) for a in compute_bnup(s, cap)]
    with pytest.raises(BarrierOpen):
        assemble_barrier(s, cap, surfaces, close_on_nup=False)


def test_assemble_matches_lockstep_build(ref_barrier):
    s, cap, bar = ref_barrier
    surfaces = [integrate_surface(s, cap, a, 1.0) for a in compute_bnup(s, cap)]
    again = assemble_barrier(s, cap, surfaces, close_on_nup=False)
    assert np.allclose(again.junction, bar.junction, atol=1e-12)


def test_fast_planner_diverges():
    s = chauffeur(0.9)
    cap = CaptivitySet.for_system(s, BETA)
    with pytest.raises(Diverged):
        integrate_surface(s, cap, compute_bnup(s, cap)[0], 10.0, 1e-3)


def _generic(jacobian_scale=None):
    def f(x, u_lf, u_hf, chi):
        return np.array([-x[1] * OMEGA * u_hf[0] + chi * math.sin(u_lf[0]),
                         x[0] * OMEGA * u_hf[0] + chi * math.cos(u_lf[0]) - 1.0])

    jac = None
    if jacobian_scale is not None:
        def jac(x, u_lf, u_hf, chi):
            return jacobian_scale * np.array([[0.0, -OMEGA * u_hf[0]], [OMEGA * u_hf[0], 0.0]])

    return GenericSystem(state_dim=2, f=f, planner_box_spec=InputBox((-math.pi,), (math.pi,)),
                         tracker_box=InputBox((-1.0,), (1.0,)), projection_diag=(1, 1), theta=0.10,
                         jacobian=jac, scale=BETA)


def test_generic_engine_matches_chauffeur():
    # the same dynamics through the generic grid/finite-difference path
    g = _generic()
    cap = CaptivitySet.for_system(g, BETA)
    anchors = compute_bnup(g, cap)
    assert np.allclose(sorted(a.state[0] for a in anchors), [-BETA * math.sqrt(0.99), BETA * math.sqrt(0.99)],
                       atol=1e-9)
    right = max(anchors, key=lambda a: a.state[0])
    tr = integrate_surface(g, cap, right, 0.1, 1e-3)
    exact, _ = chauffeur_surface(chauffeur(0.10), right.state, right.outward_normal, -0.1)
    assert max(np.max(np.abs(exact(t)[0] - x)) for t, x in zip(tr.t, tr.states)) <= 1e-8


def test_wrong_jacobian_is_reported_as_drift():
    g = _generic(jacobian_scale=0.5)
    cap = CaptivitySet.for_system(g, BETA)
    with pytest.raises(IntegrationDrift):
        integrate_surface(g, cap, compute_bnup(g, cap)[0], 0.3, 1e-3)


def test_trajectory_csv(tmp_path, ref_barrier):
    _, _, bar = ref_barrier
    p = right_piece(bar)
    path = tmp_path / "s.csv"
    p.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "x1", "x2", "xi1", "xi2", "u_lf", "u_hf"]
    assert len(rows) == len(p.t) + 1
    back = np.array(rows[1:], dtype=float)
    assert np.array_equal(back[:, 1:3], p.states)


# -- tracking error bound ---------------------------------------------------


def _ray_cast(poly, pt):
    x, y = pt
    a, b = poly, np.roll(poly, -1, axis=0)
    up = (a[:, 1] > y) != (b[:, 1] > y)
    xc = a[up, 0] + (y - a[up, 1]) * (b[up, 0] - a[up, 0]) / (b[up, 1] - a[up, 1])
    return bool(np.count_nonzero(x < xc) % 2)


def test_wte_equals_beta(teb):
    assert abs(teb.wte - 0.25) <= 1e-9


def test_boundary_closed_at_bnup(teb):
    # each component is stored without its end point, which is the first
    # vertex of the next component: the loop is closed iff every gap between
    # consecutive vertices is an ordinary sampling step
    V = teb.polygon(0)
    gaps = np.linalg.norm(np.roll(V, -1, axis=0) - V, axis=1)
    assert gaps.max() <= 2e-4
    comps = teb.components()
    for (_, a), (_, b) in zip(comps, comps[1:] + comps[:1]):
        assert np.linalg.norm(a[-1] - b[0]) <= 2e-4
    for anchor in teb.anchors:
        assert np.min(np.linalg.norm(V - anchor, axis=1)) <= 1e-9
    # the NUP arc meets the barrier exactly at the junction on the circle
    assert np.min(np.linalg.norm(dict(comps)["nup"] - teb.barrier.junction, axis=1)) <= 1e-12


def test_membership_agrees_with_polygon_oracle(tmp_path, teb):
    path = tmp_path / "teb.csv"
    teb.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["component", "x1", "x2"]
    poly = np.array([r[1:] for r in rows[1:]], dtype=float)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.26, 0.26, size=(400, 2))
    for p in pts:
        lab = teb_membership(teb, p)
        if lab in (Membership.BOUNDARY_NUP, Membership.BOUNDARY_BARRIER):
            continue
        assert (lab is Membership.INTERIOR) == _ray_cast(poly, p)
    assert (teb_membership(teb, [0, 0]) is Membership.INTERIOR) == _ray_cast(poly, [0, 0])


def test_membership_examples(teb):
    assert teb_membership(teb, teb.anchors[0]) is Membership.BOUNDARY_NUP
    assert teb_membership(teb, [0, -0.25]) is Membership.OUTSIDE
    assert teb_membership(teb, [0, 0.25 + 1e-3]) is Membership.OUTSIDE
    piece = teb.barrier.pieces[0]
    mid = piece.states[len(piece.t) // 2]
    assert teb_membership(teb, mid) is Membership.BOUNDARY_BARRIER


def test_origin_lies_outside(teb):
    # a tracker that cannot stop loses a planner sitting on top of it: the
    # planner drifts backward toward (0, -beta), which is escapable
    assert teb_membership(teb, [0, 0]) is Membership.OUTSIDE


def test_teb_interior_points_classified(teb):
    assert teb_membership(teb, [0.2, 0.1]) is Membership.INTERIOR
    assert teb_membership(teb, [-0.2, 0.1]) is Membership.INTERIOR
    assert 0 < teb.area < math.pi * 0.25 ** 2
