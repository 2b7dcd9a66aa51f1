"""The inverse question and an offline margin table.

Given a planner speed of 0.10 m/s, find the smallest margin; then tabulate
the admissible planner speed over a range of margins.  A margin below the
feasible minimum shows up as an infeasible row.
"""

import math

from ceteb import ChauffeurSystem
from ceteb.adaptation import solve_alpha_for_theta, sweep

sys = ChauffeurSystem(v_hf=1.0, omega_max=2 * math.pi)

rep = solve_alpha_for_theta(sys, 0.10)
print(f"margin for a 0.10 m/s planner: {rep.beta:.6f} m")

fast = solve_alpha_for_theta(sys, 0.50)
print(f"margin for a 0.50 m/s planner: {fast.beta:.6f} m"
      + (" (set by where the barrier first closes)" if fast.closure_limited else ""))

print(f"{'beta':>8} {'theta':>10}  status")
for row in sweep(sys, [0.15, 0.25, 0.30, 0.35, 0.40], step=1e-3):
    print(f"{row.beta:8.3f} {row.theta:10.6f}  {row.status}")
