import csv

import numpy as np
import pytest

from ceteb import DomainError
from ceteb.barrier import Membership, teb_membership
from ceteb.sim import (
    Constant, OptimalEscape, RandomPiecewise, SimConfig, monte_carlo_invariance, simulate,
)

BETA = 0.25


def test_interior_start_optimal_escape_contained(solved, teb):
    res = simulate(solved.system, teb, SimConfig(x0=[0.2, 0.1], horizon=20.0, dt=1e-3))
    assert not res.escaped
    assert res.max_norm <= BETA * (1 + 1e-6)
    assert res.first_clamp_time is not None


def test_start_in_escape_zone_escapes(solved, teb):
    x0 = [0.0, -0.24]
    assert teb_membership(teb, x0) is Membership.OUTSIDE
    res = simulate(solved.system, teb, SimConfig(x0=x0, horizon=5.0))
    assert res.escaped


def test_static_planner_cannot_force_escape(solved, teb):
    s = solved.system.with_performance(0.0)
    res = simulate(s, teb, SimConfig(x0=[0.2, 0.1], horizon=5.0, planner_policy=Constant(0.3)))
    assert not res.escaped


def test_escaped_flag_matches_max_norm(solved, teb):
    for x0 in ([0.2, 0.1], [0.0, -0.24]):
        cfg = SimConfig(x0=x0, horizon=2.0)
        res = simulate(solved.system, teb, cfg)
        assert res.escaped == (res.max_norm > BETA * (1 + cfg.tolerance_band))


def test_sharpness_from_barrier(solved, teb):
    right = next(p for p in solved.barrier.pieces if p.states[-1][0] > 0)
    res = simulate(solved.system, teb, SimConfig(x0=right.state_at(-0.3), horizon=3.0))
    assert not res.escaped
    assert BETA - res.max_norm <= 1e-3 * BETA


def test_random_piecewise_seeded(solved, teb):
    cfg = SimConfig(x0=[0.2, 0.1], horizon=1.0, planner_policy=RandomPiecewise(5, 0.1))
    a = simulate(solved.system, teb, cfg)
    b = simulate(solved.system, teb, cfg)
    assert np.array_equal(a.states, b.states)
    assert not a.escaped


def test_trajectory_csv(solved, teb, tmp_path):
    res = simulate(solved.system, teb, SimConfig(x0=[0.2, 0.1], horizon=0.05))
    p = tmp_path / "traj.csv"
    res.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0][:3] == ["t", "x1", "x2"]
    assert "xi1" not in rows[0]
    assert len(rows) == len(res.t) + 1


def test_monte_carlo_small_no_escapes(solved, teb):
    m = monte_carlo_invariance(solved.system, teb, 20, 42, horizon=5.0)
    assert m.escapes == 0
    assert m.worst_max_norm <= BETA * (1 + 1e-6)
    assert 0 < m.acceptance_rate <= 1


def test_monte_carlo_seed_determinism(solved, teb):
    a = monte_carlo_invariance(solved.system, teb, 1, 9, horizon=1.0)
    b = monte_carlo_invariance(solved.system, teb, 1, 9, horizon=1.0)
    assert a.to_json() == b.to_json()


def test_monte_carlo_independent_of_batching(solved, teb):
    a = monte_carlo_invariance(solved.system, teb, 4, 3, horizon=0.5, batch=4)
    b = monte_carlo_invariance(solved.system, teb, 4, 3, horizon=0.5, batch=1)
    assert a.to_json() == b.to_json()


def test_monte_carlo_rejects_zero_runs(solved, teb):
    with pytest.raises(DomainError):
        monte_carlo_invariance(solved.system, teb, 0, 1)


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(horizon=1e-4, dt=1e-3), dict(x0=[np.nan, 0.0])])
def test_sim_config_validation(kw):
    with pytest.raises(DomainError):
        SimConfig(**kw)


def test_simulate_requires_x0(solved, teb):
    with pytest.raises(DomainError):
        simulate(solved.system, teb, SimConfig(planner_policy=OptimalEscape()))
