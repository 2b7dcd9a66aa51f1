"""Minimal-intervention safety controller over an assembled TEB."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .barrier import Membership, TrackingErrorBound
from .errors import SafetyViolation
from .systems import RelativeSystem

GUARD = 1e-4


class Mode(enum.Enum):
    FREE = "free"
    CLAMP = "clamp"


@dataclass(frozen=True)
class ControlDecision:
    mode: Mode
    u_hf: np.ndarray | None = None
    boundary_component: str | None = None  # "nup" or "barrier"
    membership: Membership | None = None


def _anchor_input(teb: TrackingErrorBound, k: int) -> np.ndarray:
    return np.asarray(teb.barrier.pieces[k].seg_u_hf[-1], dtype=float)


def clamp_inputs(teb: TrackingErrorBound, sys: RelativeSystem, X, segments, points):
    """Tracker inputs for states clamped to the boundary segment ``segments``.

    NUP segments use the min-max minimiser at the state's own outward normal;
    barrier segments use the input held along that stretch of surface.  Near
    a BNUP anchor the barrier strategy wins.
    """
    X = np.atleast_2d(X)
    lab = teb.seg_label[segments]
    dim = sys.tracker_box.dim
    U = np.empty((len(X), dim))
    on_bar = lab > 0
    if np.any(on_bar):
        U[on_bar, 0] = teb.seg_u[segments[on_bar]]
        bad = on_bar & np.isnan(U[:, 0])
        for i in np.flatnonzero(bad):
            U[i] = _anchor_input(teb, int(lab[segments[i]] - 1) if lab[segments[i]] > 0 else 0)
    nup = ~on_bar
    if np.any(nup) and len(teb.anchors):
        # nearest point at a BNUP anchor: take the adjacent barrier's input
        d = np.linalg.norm(points[nup][:, None, :] - teb.anchors[None], axis=2)
        k = np.argmin(d, axis=1)
        near = d[np.arange(len(k)), k] <= teb.band
        idx = np.flatnonzero(nup)
        for i, kk in zip(idx[near], k[near]):
            U[i] = _anchor_input(teb, int(kk))
        nup[idx[near]] = False
    if np.any(nup):
        U[nup] = sys.nup_tracker_input_many(X[nup])
    return U, np.where(lab > 0, "barrier", "nup")


def safety_control(teb: TrackingErrorBound, sys: RelativeSystem, x, guard: float = GUARD,
                   strict: bool = True) -> ControlDecision:
    """Free in the interior, the game-optimal tracker input on the boundary.

    States within ``guard * beta`` of the boundary are clamped early.  Outside
    the TEB a :class:`SafetyViolation` is raised unless ``strict`` is false,
    in which case the nearest boundary strategy is returned.
    """
    x = np.asarray(x, dtype=float)
    q = teb.query(x[None])
    d, seg, pt = q.distance[0], q.segment[0], q.point[0]
    if d <= teb.band:
        mem = Membership.BOUNDARY_NUP if teb.seg_label[seg] == 0 or teb._touches_nup(pt) \
            else Membership.BOUNDARY_BARRIER
    else:
        mem = Membership.INTERIOR if q.inside[0] else Membership.OUTSIDE
    if mem is Membership.OUTSIDE and strict:
        raise SafetyViolation(f"state {x} lies outside the tracking error bound (distance {d:.3e})")
    if mem is Membership.INTERIOR and d > guard * teb.beta:
        return ControlDecision(Mode.FREE, membership=mem)
    U, comp = clamp_inputs(teb, sys, x[None], q.segment, q.point)
    u = U[0]
    sys.tracker_box.check(u, "clamped tracker input")
    return ControlDecision(Mode.CLAMP, u, str(comp[0]), mem)
