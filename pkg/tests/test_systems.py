import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceteb import ChauffeurSystem, DomainError, GenericSystem, InputBox, load_system, system_from_dict
from ceteb.systems import eval_dynamics, eval_jacobian, finite_difference_jacobian, relative_state

from conftest import OMEGA, chauffeur


def test_dynamics_origin_static_planner():
    s = chauffeur(0.0)
    assert np.allclose(eval_dynamics(s, [0, 0], [0.0], [0.0]), [0.0, -1.0], atol=1e-15)


def test_dynamics_on_y_axis():
    s = chauffeur(0.10)
    f = eval_dynamics(s, [0, 0.25], [math.pi / 2], [1.0])
    assert np.allclose(f, [-0.25 * OMEGA + 0.10, -1.0], atol=1e-12)
    assert f[0] == pytest.approx(-1.47080, abs=1e-5)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_planner_heading_periodic(x, y, u):
    s = chauffeur(0.3)
    assert np.allclose(eval_dynamics(s, [x, y], [math.pi], [u]), eval_dynamics(s, [x, y], [-math.pi], [u]),
                       atol=1e-15)


def test_inputs_outside_box_name_the_component():
    s = chauffeur()
    with pytest.raises(DomainError, match="u_hf"):
        eval_dynamics(s, [0, 0], [0.0], [1.5])
    with pytest.raises(DomainError, match="u_lf"):
        eval_dynamics(s, [0, 0], [4.0], [0.0])


def test_jacobian_closed_form():
    s = chauffeur()
    assert np.allclose(eval_jacobian(s, [0.3, -0.1], [0.2], [1.0]), [[0, -OMEGA], [OMEGA, 0]])
    assert np.array_equal(eval_jacobian(s, [0.3, -0.1], [0.2], [0.0]), np.zeros((2, 2)))


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(7)
    s = chauffeur(0.4)
    for _ in range(100):
        x = rng.uniform(-1, 1, 2)
        ulf, uhf = rng.uniform(-math.pi, math.pi, 1), rng.uniform(-1, 1, 1)
        fd = finite_difference_jacobian(lambda y: s.vector_field(y, ulf, uhf), x, 1e-6)
        assert np.max(np.abs(fd - s.state_jacobian(x, ulf, uhf))) <= 1e-5


def _pendulum_like(theta=0.5):
    # two-state system with a nonlinear drift; the Jacobian is left to finite differences
    def f(x, u_lf, u_hf, chi):
        return np.array([x[1] + chi * math.sin(u_lf[0]), -math.sin(x[0]) + u_hf[0] * x[1]])

    return GenericSystem(
        state_dim=2, f=f, planner_box_spec=lambda chi: InputBox((-math.pi,), (math.pi,)),
        tracker_box=InputBox((-1.0,), (1.0,)), projection_diag=(1, 1), theta=theta,
    )


def test_generic_finite_difference_jacobian():
    s = _pendulum_like()
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = rng.uniform(-2, 2, 2)
        u = rng.uniform(-1, 1)
        exact = np.array([[0.0, 1.0], [-math.cos(x[0]), u]])
        assert np.max(np.abs(s.state_jacobian(x, [0.3], [u]) - exact)) <= 1e-5


def test_relative_state_examples():
    s = chauffeur()
    assert np.allclose(relative_state(s, [1, 0], [0, 0, 0]), [1, 0])
    # the tracker heads along (sin psi, cos psi); at psi = pi/2 it faces +x, so
    # the planner at (1, 0) lies straight ahead on the body y-axis
    assert np.allclose(relative_state(s, [1, 0], [0, 0, math.pi / 2]), [0, 1], atol=1e-15)
    assert np.allclose(relative_state(s, [0.3, -2.0], [0.3, -2.0, 1.1]), [0, 0])


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-10, 10))
def test_relative_state_preserves_distance(a, b, c, d, psi):
    r = relative_state(chauffeur(), [a, b], [c, d, psi])
    assert np.linalg.norm(r) == pytest.approx(math.hypot(a - c, b - d), rel=1e-12, abs=1e-12)


def test_relative_state_forward_axis_follows_heading():
    # body y is the component of the offset along the tracker's velocity direction
    rng = np.random.default_rng(3)
    s = chauffeur()
    for _ in range(20):
        lf, hf = rng.normal(size=2), rng.normal(size=3)
        heading = np.array([math.sin(hf[2]), math.cos(hf[2])])
        assert relative_state(s, lf, hf)[1] == pytest.approx(heading @ (lf - hf[:2]), abs=1e-12)


def test_relative_state_dimension_mismatch():
    with pytest.raises(DomainError):
        relative_state(chauffeur(), [1, 0, 0], [0, 0, 0])


def test_model_invariants():
    with pytest.raises(DomainError):
        ChauffeurSystem(v_hf=1.0, v_lf=1.0)
    with pytest.raises(DomainError):
        ChauffeurSystem(v_lf=-0.1)
    with pytest.raises(DomainError):
        ChauffeurSystem(omega_max=0.0)


def test_projection_idempotent():
    P = chauffeur().projection
    assert np.array_equal(P @ P, P)


def test_performance_mapping_monotone():
    s = chauffeur(0.0)
    grid = np.linspace(0, 0.99, 12)
    boxes = [s.with_performance(t).planner_input_set() for t in grid]
    assert all(a.issubset(b) for a, b in zip(boxes, boxes[1:]))
    assert [s.with_performance(t).v_lf for t in grid] == list(grid)
    g = _pendulum_like()
    assert g.with_performance(0.2).chi == 0.2


def test_json_loading(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"model": "chauffeur", "v_hf": 1.0, "omega_max": 6.2832, "v_lf": 0.10}))
    s = load_system(p)
    assert (s.v_hf, s.omega_max, s.v_lf) == (1.0, 6.2832, 0.10)
    assert system_from_dict(s.to_dict()) == s


@pytest.mark.parametrize("doc", [
    {"model": "chauffeur", "v_hf": 1.0, "speed": 2},
    {"model": "unicycle"},
    {"model": "chauffeur", "v_lf": "fast"},
    {"model": "chauffeur", "v_lf": 1.5},
])
def test_json_rejections(doc):
    with pytest.raises(DomainError):
        system_from_dict(doc)
