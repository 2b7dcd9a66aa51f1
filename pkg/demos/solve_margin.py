"""Margin 0.25 m for a unicycle tracker: how fast may the planner move?

Solves for the planner speed, reports the validity margins and writes the
tracking error bound as CSV and SVG into ``demo_out/``.
"""

import math
from pathlib import Path

from ceteb import CaptivitySet, ChauffeurSystem, build_teb
from ceteb.adaptation import compute_limits, solve_theta_for_alpha
from ceteb.io import write_teb_svg

out = Path("demo_out")
out.mkdir(exist_ok=True)

sys = ChauffeurSystem(v_hf=1.0, omega_max=2 * math.pi)
beta_min, theta_max = compute_limits(sys)
print(f"smallest feasible margin {beta_min:.6f} m, fastest planner {theta_max:.6f} m/s")

rep = solve_theta_for_alpha(sys, 0.25)
print(f"planner speed for a 0.25 m margin: {rep.theta:.6f} m/s "
      f"({rep.iterations} barrier evaluations, {rep.wall_time:.1f} s)")
x, y = map(float, rep.junction)
v = rep.validity
print(f"junction ({x:.3e}, {y:.12f}), margins {v.margin18:.4f} / {v.margin20:.1e} / {v.margin21:.4f}")

teb = build_teb(rep.system, CaptivitySet.for_system(rep.system, rep.beta), rep.barrier)
print(f"worst-case tracking error {teb.wte:.12f} m")
teb.to_csv(out / "teb.csv")
write_teb_svg(out / "teb.svg", teb)
print(f"wrote {out / 'teb.csv'} and {out / 'teb.svg'}")
