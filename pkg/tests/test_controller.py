import numpy as np
import pytest

from ceteb import SafetyViolation
from ceteb.barrier import Membership, teb_membership
from ceteb.controller import Mode, safety_control


def right_left(solved):
    pieces = solved.barrier.pieces
    right = next(p for p in pieces if p.states[-1][0] > 0)
    left = next(p for p in pieces if p.states[-1][0] < 0)
    return right, left


def test_interior_is_free(solved, teb):
    d = safety_control(teb, solved.system, [0.2, 0.1])
    assert d.mode is Mode.FREE and d.u_hf is None
    assert d.membership is Membership.INTERIOR


@pytest.mark.parametrize("x", [[0.0, 0.0], [0.0, -0.2], [0.3, 0.0]])
def test_outside_raises(solved, teb, x):
    assert teb_membership(teb, x) is Membership.OUTSIDE
    with pytest.raises(SafetyViolation):
        safety_control(teb, solved.system, x)


def test_outside_non_strict_returns_clamp(solved, teb):
    d = safety_control(teb, solved.system, [0.0, 0.0], strict=False)
    assert d.mode is Mode.CLAMP


def test_right_piece_below_switch_clamps_plus_one(solved, teb):
    right, _ = right_left(solved)
    t_sw = right.switch_times[0]
    for t in np.linspace(t_sw + 0.02, -0.02, 7):
        x = right.state_at(t)
        d = safety_control(teb, solved.system, x)
        assert d.mode is Mode.CLAMP and d.boundary_component == "barrier"
        assert d.u_hf[0] == 1.0


def test_barrier_inputs_follow_switch(solved, teb):
    right, left = right_left(solved)
    t_sw = right.switch_times[0]
    t_after = 0.5 * (t_sw + right.t_hat)
    assert safety_control(teb, solved.system, right.state_at(t_after)).u_hf[0] == -1.0
    # the mirror piece turns the other way
    assert safety_control(teb, solved.system, left.state_at(-0.3)).u_hf[0] == -1.0
    assert safety_control(teb, solved.system, left.state_at(t_after)).u_hf[0] == 1.0


def test_bnup_prefers_barrier_strategy(solved, teb):
    right, _ = right_left(solved)
    d = safety_control(teb, solved.system, right.states[-1])
    assert d.mode is Mode.CLAMP
    assert d.u_hf[0] == right.seg_u_hf[-1][0]


def test_nup_clamp_satisfies_hamiltonian(solved, teb):
    s = solved.system
    phis = np.linspace(-np.pi, np.pi, 721)
    checked = 0
    for th in np.linspace(0.3, 1.3, 9):
        x = 0.25 * np.array([np.sin(th), np.cos(th)]) * (1 - 1e-9)
        d = safety_control(teb, s, x)
        if d.boundary_component != "nup":
            continue
        nu = x / np.linalg.norm(x)
        h = max(nu @ s.vector_field(x, [p], d.u_hf) for p in phis)
        assert h <= 1e-6
        checked += 1
    assert checked >= 5


def test_clamp_inputs_within_box_and_free_only_inside(solved, teb):
    rng = np.random.default_rng(7)
    lo, hi = teb.bounding_box
    pts = np.vstack([teb.vertices, rng.uniform(lo, hi, size=(300, 2))])
    for x in pts:
        try:
            d = safety_control(teb, solved.system, x)
        except SafetyViolation:
            assert teb_membership(teb, x) is Membership.OUTSIDE
            continue
        if d.mode is Mode.FREE:
            assert teb_membership(teb, x) is Membership.INTERIOR
        else:
            assert np.all(np.abs(d.u_hf) <= 1.0)


def test_deterministic(solved, teb):
    right, _ = right_left(solved)
    for x in ([0.2, 0.1], right.state_at(-0.4), [0.2, 0.15]):
        a = safety_control(teb, solved.system, x)
        b = safety_control(teb, solved.system, np.array(x, copy=True))
        assert a.mode == b.mode and a.boundary_component == b.boundary_component
        assert (a.u_hf is None and b.u_hf is None) or np.array_equal(a.u_hf, b.u_hf)
