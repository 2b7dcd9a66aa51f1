"""Closed-loop check of the safety controller against planner adversaries.

Random piecewise-constant planners start inside the bound and never push the
tracking error past the margin.  A run started on the barrier shows the bound
is tight, and one started outside the bound (but inside the margin) escapes.
"""

import math

from ceteb import CaptivitySet, ChauffeurSystem, build_teb
from ceteb.adaptation import solve_theta_for_alpha
from ceteb.sim import SimConfig, monte_carlo_invariance, simulate

rep = solve_theta_for_alpha(ChauffeurSystem(v_hf=1.0, omega_max=2 * math.pi), 0.25)
s = rep.system
teb = build_teb(s, CaptivitySet.for_system(s, rep.beta), rep.barrier)

mc = monte_carlo_invariance(s, teb, 200, seed=42, horizon=10.0)
print(f"random adversaries: {mc.escapes} escapes in {mc.runs} runs, worst norm {mc.worst_max_norm:.9f}")

right = next(p for p in rep.barrier.pieces if p.origin.state[0] > 0)
tight = simulate(s, teb, SimConfig(x0=right.state_at(-0.3), horizon=5.0))
print(f"start on the barrier: worst norm {tight.max_norm:.9f} (margin {rep.beta})")

lost = simulate(s, teb, SimConfig(x0=[0.0, -0.24], horizon=5.0))
print(f"start outside the bound: escaped={lost.escaped}, worst norm {lost.max_norm:.6f}")
