import math

import pytest

from ceteb import CaptivitySet, ChauffeurSystem, build_teb
from ceteb.adaptation import solve_theta_for_alpha

OMEGA = 2 * math.pi
ALPHA = 0.25


def chauffeur(v_lf=0.10, v_hf=1.0, omega_max=OMEGA):
    return ChauffeurSystem(v_hf=v_hf, v_lf=v_lf, omega_max=omega_max)


@pytest.fixture(scope="session")
def solved():
    """Margin 0.25 solved for the planner speed; shared by slow tests."""
    return solve_theta_for_alpha(chauffeur(0.0), ALPHA)


@pytest.fixture(scope="session")
def teb(solved):
    s = solved.system
    return build_teb(s, CaptivitySet.for_system(s, solved.beta), solved.barrier)
