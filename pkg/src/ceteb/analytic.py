"""Closed-form chauffeur surfaces.

Between tracker switches the adjoint rotates rigidly, ``xi(t) = R(w t) xi0``
with ``w = omega u_hf``, and the planner heading is aligned with it, so the
state solves a linear system with a rotating forcing term:

    x(t) = R(w t) x0 + t v_lf R(w t) xi0_hat - v_hf S(w, t) e_y

with ``S(a, t) = int_0^t R(a s) ds``.  Switch times are the zeros of
``xi_x y - xi_y x``, found by bracketing and Brent refinement.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq

from .systems import ChauffeurSystem


def _rot(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def _rot_integral(a: float, t: float) -> np.ndarray:
    if a == 0.0:
        return t * np.eye(2)
    s, c = math.sin(a * t), math.cos(a * t)
    return np.array([[s, c - 1.0], [1.0 - c, s]]) / a


class _Arc:
    """One constant-input piece starting at time ``t0`` (moving backward)."""

    def __init__(self, sys: ChauffeurSystem, t0: float, x0, xi0, u: float):
        self.sys, self.t0, self.u = sys, t0, u
        self.x0 = np.asarray(x0, dtype=float)
        self.xi0 = np.asarray(xi0, dtype=float) / np.linalg.norm(xi0)
        self.w = sys.omega_max * u

    def at(self, t: float):
        tau = t - self.t0
        R = _rot(self.w * tau)
        xi = R @ self.xi0
        x = R @ self.x0 + tau * self.sys.v_lf * xi - self.sys.v_hf * (_rot_integral(self.w, tau) @ np.array([0.0, 1.0]))
        return x, xi

    def switching(self, t: float) -> float:
        x, xi = self.at(t)
        return xi[0] * x[1] - xi[1] * x[0]


def chauffeur_surface(sys: ChauffeurSystem, x0, xi0, t_end: float, u0: float | None = None,
                      scan: float = 1e-3):
    """Exact retrograde surface from ``(x0, xi0)`` at ``t = 0`` down to ``t_end < 0``.

    Returns ``(evaluate, switch_times)`` where ``evaluate(t)`` gives the
    state and unit adjoint.  When ``u0`` is omitted the initial tracker input
    is the one whose switching argument keeps its sign just after the start.
    """
    if t_end >= 0:
        raise ValueError("t_end must be negative")
    if u0 is None:
        u0 = None
        for u in (1.0, -1.0):
            s = _Arc(sys, 0.0, x0, xi0, u).switching(-1e-6)
            if s * u > 0:
                u0 = u
                break
        if u0 is None:
            u0 = sys.sgn_zero
    arcs = [_Arc(sys, 0.0, x0, xi0, u0)]
    switches = []
    t = 0.0
    while True:
        arc = arcs[-1]
        sgn = arc.u
        t_sw = None
        a = t
        while a > t_end:
            b = max(a - scan, t_end)
            # skip the zero at the start of an arc
            fa = sgn * arc.switching(a if a < t else a - 1e-9)
            fb = sgn * arc.switching(b)
            if fa > 0 and fb < 0:
                t_sw = brentq(arc.switching, b, a if a < t else a - 1e-9, xtol=1e-15, rtol=1e-15, maxiter=200)
                break
            a = b
        if t_sw is None:
            break
        switches.append(t_sw)
        x, xi = arc.at(t_sw)
        arcs.append(_Arc(sys, t_sw, x, xi, -arc.u))
        t = t_sw

    def evaluate(tq: float):
        if not t_end - 1e-12 <= tq <= 1e-12:
            raise ValueError("time outside the computed interval")
        k = sum(1 for s in switches if tq < s)
        return arcs[k].at(tq)

    return evaluate, switches


def chauffeur_bnup_surface(sys: ChauffeurSystem, beta: float, t_end: float, side: int = 1):
    """Closed-form surface anchored at the right (``side=1``) or left BNUP."""
    p = sys.bnup_closed_form(beta)[0 if side > 0 else 1]
    return chauffeur_surface(sys, p, p / np.linalg.norm(p), t_end)
