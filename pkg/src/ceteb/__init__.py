"""Captivity-exploiting tracking error bounds for planner/tracker pairs."""

from .errors import *  # noqa: F401,F403
from .systems import ChauffeurSystem, GenericSystem, InputBox, RelativeSystem, load_system, system_from_dict
from .geometry import CaptivitySet, BnupPoint, BoundaryClass, compute_bnup, minmax_hamiltonian, nup_membership
from .barrier import (
    ClosedBarrier,
    Membership,
    SurfaceTrajectory,
    TrackingErrorBound,
    assemble_barrier,
    build_barrier,
    build_teb,
    integrate_surface,
    teb_membership,
)

__version__ = "0.1.0"
