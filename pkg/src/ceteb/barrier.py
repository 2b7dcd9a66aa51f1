"""Semipermeable surfaces, closed barriers and the tracking error bound.

Surfaces are traced by integrating the coupled state/adjoint system backward
in time from a BNUP anchor (``t_bnup = 0``, times are negative).  The
integrator is classical RK4 with a fixed base step; tracker-input switches and
crossings of the captivity boundary are located inside a step and the
integration is restarted there, so every stored segment is smooth.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from .errors import BarrierOpen, Diverged, DomainError, GeometryError, IntegrationDrift
from .geometry import (
    BnupPoint,
    BoundaryClass,
    CaptivitySet,
    compute_bnup,
    minmax_hamiltonian,
    nup_arcs,
    nup_membership,
)
from .systems import RelativeSystem

DEFAULT_STEP = 1e-4
DRIFT_TOL = 1e-6
SWITCH_TTOL = 1e-12
#: retrograde integration ends once ||P x|| exceeds this multiple of beta
ASSEMBLY_STOP_FACTOR = 4.0
CHUNK = 0.05


def _rk4(rhs, z, h, u, k1=None):
    step = getattr(getattr(rhs, "__self__", None), "rk4_step", None)
    if step is not None:
        return step(z, h, u)
    if k1 is None:
        k1 = rhs(z, u)
    k2 = rhs(z + 0.5 * h * k1, u)
    k3 = rhs(z + 0.5 * h * k2, u)
    k4 = rhs(z + h * k3, u)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def surface_optimal_inputs(sys: RelativeSystem, x, xi) -> tuple[np.ndarray, np.ndarray]:
    """Arg-min-max inputs ``(u_lf, u_hf)`` for a surface with normal ``xi``."""
    xi = np.asarray(xi, dtype=float)
    if not np.any(xi):
        raise DomainError("adjoint must be nonzero")
    return sys.minmax_inputs(np.asarray(x, dtype=float), xi)


def adjoint_rhs(sys: RelativeSystem, x, xi, u_lf, u_hf) -> np.ndarray:
    """``-(df/dx)^T xi`` at the given inputs."""
    return -sys.state_jacobian(np.asarray(x, dtype=float), u_lf, u_hf).T @ np.asarray(xi, dtype=float)


@dataclass
class SurfaceTrajectory:
    """Samples of one semipermeable surface, ordered by increasing time.

    ``seg_u_hf[i]`` is the tracker input held on ``(t[i], t[i+1])``; the
    dense output :meth:`state_at` re-runs one RK4 sub-step from the sample
    nearer the anchor so that it agrees with the stored integration path.
    """

    system: RelativeSystem = field(repr=False)
    t: np.ndarray
    states: np.ndarray
    adjoints: np.ndarray
    u_lf: np.ndarray
    u_hf: np.ndarray
    seg_u_hf: np.ndarray = field(repr=False)
    origin: BnupPoint = field(repr=False)
    t_bnup: float = 0.0
    t_hat: float | None = None
    switch_times: list = field(default_factory=list)
    exits: list = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    def __len__(self):
        return len(self.t)

    def _u_arg(self, i):
        u = self.seg_u_hf[i]
        return float(u[0]) if len(u) == 1 else u

    def z_at(self, t: float) -> np.ndarray:
        ts = self.t
        if not ts[0] - 1e-12 <= t <= ts[-1] + 1e-12:
            raise DomainError(f"time {t} outside [{ts[0]}, {ts[-1]}]")
        i = int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))
        z0 = np.concatenate([self.states[i + 1], self.adjoints[i + 1]])
        return _rk4(self.system.coupled_rhs, z0, t - ts[i + 1], self._u_arg(i))

    def state_at(self, t: float) -> np.ndarray:
        return self.z_at(t)[: self.n]

    def velocity_at(self, t: float, seg: int | None = None) -> np.ndarray:
        if seg is None:
            seg = int(np.clip(np.searchsorted(self.t, t) - 1, 0, len(self.t) - 2))
        return self.system.coupled_rhs(self.z_at(t), self._u_arg(seg))[: self.n]

    def residuals(self) -> np.ndarray:
        """``xi . f(x, u*_lf, u*_hf)`` at every sample."""
        out = np.empty(len(self.t))
        for i in range(len(self.t)):
            u = self.u_hf[i]
            z = np.concatenate([self.states[i], self.adjoints[i]])
            out[i] = self.adjoints[i] @ self.system.coupled_rhs(z, float(u[0]) if len(u) == 1 else u)[: self.n]
        return out

    def projected_norms(self, projection) -> np.ndarray:
        return np.linalg.norm(self.states @ np.asarray(projection).T, axis=1)

    def switch_states(self) -> np.ndarray:
        if not self.switch_times:
            return np.zeros((0, self.n))
        return np.array([self.state_at(t) for t in self.switch_times])

    def trim(self, t_hat: float) -> "SurfaceTrajectory":
        """Barrier-contributing part ``[t_hat, t_bnup]`` with the exact end point."""
        ts = self.t
        if not ts[0] - 1e-12 <= t_hat <= ts[-1]:
            raise DomainError("t_hat outside the integrated interval")
        i = int(np.clip(np.searchsorted(ts, t_hat) - 1, 0, len(ts) - 2))
        z = self.z_at(t_hat)
        keep = slice(i + 1, None)
        if ts[i + 1] - t_hat < 1e-13:
            keep = slice(i + 2, None)
            i += 1
        xi0 = z[self.n:] / np.linalg.norm(z[self.n:])
        u_lf0 = self.system.planner_response(z[: self.n], xi0, self._u_arg(min(i, len(ts) - 2)))
        return replace(
            self,
            t=np.concatenate([[t_hat], ts[keep]]),
            states=np.vstack([z[: self.n], self.states[keep]]),
            adjoints=np.vstack([xi0, self.adjoints[keep]]),
            u_lf=np.vstack([np.atleast_1d(u_lf0), self.u_lf[keep]]),
            u_hf=np.vstack([self.seg_u_hf[min(i, len(ts) - 2)], self.u_hf[keep]]),
            seg_u_hf=self.seg_u_hf[min(i, len(ts) - 2):],
            t_hat=float(t_hat),
            switch_times=[s for s in self.switch_times if s >= t_hat],
            exits=[e for e in self.exits if e[0] >= t_hat],
        )

    def to_csv(self, path) -> None:
        write_trajectory_csv(path, self.t, self.states, self.adjoints, self.u_lf, self.u_hf)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(path, t, states, adjoints=None, u_lf=None, u_hf=None) -> None:
    """Columns ``t,x1..xn[,xi1..xin],u_lf,u_hf``; header always written."""
    states = np.asarray(states)
    n = states.shape[1]
    cols = ["t"] + [f"x{i + 1}" for i in range(n)]
    if adjoints is not None:
        cols += [f"xi{i + 1}" for i in range(n)]

    def ucols(name, u):
        if u is None:
            return []
        u = np.asarray(u).reshape(len(t), -1)
        return [name] if u.shape[1] == 1 else [f"{name}{j + 1}" for j in range(u.shape[1])]

    cols += ucols("u_lf", u_lf) + ucols("u_hf", u_hf)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(len(t)):
            row = [t[k], *states[k]]
            if adjoints is not None:
                row += list(adjoints[k])
            for u in (u_lf, u_hf):
                if u is not None:
                    row += list(np.asarray(u).reshape(len(t), -1)[k])
            w.writerow([_fmt(v) for v in row])


def _tangent_toward_nup(sys: RelativeSystem, cap: CaptivitySet, anchor: BnupPoint) -> np.ndarray | None:
    """Unit boundary tangent at a planar anchor pointing into the NUP."""
    ax = cap.critical_axes
    if len(ax) != 2 or math.isnan(anchor.angle):
        return None
    tang = np.zeros(cap.projection.shape[0])
    tang[ax[0]], tang[ax[1]] = -math.sin(anchor.angle), math.cos(anchor.angle)
    eps = 1e-6
    for sign in (1.0, -1.0):
        x = cap.boundary_point(anchor.angle + sign * eps, anchor.kappa)
        if minmax_hamiltonian(sys, x, cap.outward_normal(x)) <= 0:
            return sign * tang
    return None


class _RetrogradeFlow:
    """Incremental retrograde integration of one surface."""

    def __init__(self, sys: RelativeSystem, cap: CaptivitySet, anchor: BnupPoint, step: float,
                 max_norm_factor: float = 10.0, stop_factor: float | None = None,
                 drift_tol: float = DRIFT_TOL):
        if step <= 0:
            raise DomainError("step must be positive")
        self.sys, self.cap, self.anchor, self.step = sys, cap, anchor, step
        self.n = sys.state_dim
        self.P = cap.projection
        self.crit = cap.critical_axes
        self.max_norm = max_norm_factor * cap.beta
        self.stop_norm = None if stop_factor is None else stop_factor * cap.beta
        self.drift_tol = drift_tol
        self.rhs = sys.coupled_rhs
        xi0 = np.asarray(anchor.outward_normal, dtype=float)
        self.z = np.concatenate([np.asarray(anchor.state, dtype=float), xi0 / np.linalg.norm(xi0)])
        self.t = 0.0
        self.box = sys.tracker_box
        self.has_sw = self.box.dim == 1 and sys.switching_function(self.z[: self.n], self.z[self.n:]) is not None
        self.u = self._initial_input()
        self.ts = [0.0]
        self.zs = [self.z.copy()]
        self.us = [self.u.copy()]
        self.seg_u = []
        self.switches = []
        self.exits = []
        self.r = cap.norm(self.z[: self.n])
        self.inside = False
        self.done = False
        self.reason = None
        self._k1 = None

    # -- inputs ---------------------------------------------------------------

    def _arg(self, u):
        return float(u[0]) if len(u) == 1 else u

    def _sw(self, z):
        return self.sys.switching_function(z[: self.n], z[self.n:])

    def _u_from_sign(self, s):
        if s > 0:
            return np.array([self.box.upper[0]])
        if s < 0:
            return np.array([self.box.lower[0]])
        return np.array([self.box.upper[0] if self.sys.sgn_zero > 0 else self.box.lower[0]])

    def _optimal_u(self, z):
        if self.has_sw:
            return self._u_from_sign(self._sw(z))
        return np.asarray(self.sys.minmax_inputs(z[: self.n], z[self.n:])[1], dtype=float)

    def _initial_input(self):
        # the switching argument vanishes at the anchor; take the one-sided
        # limit along the retrograde flow from a half-step trial
        z0, h = self.z, -0.5 * self.step
        if self.has_sw:
            cands = []
            for u in (np.array([self.box.upper[0]]), np.array([self.box.lower[0]])):
                s = self._sw(_rk4(self.rhs, z0, h, self._arg(u)))
                if np.sign(s) == np.sign(u[0]) or (u[0] == 0 and s == 0):
                    cands.append(u)
        else:
            u0 = self._optimal_u(z0)
            u1 = self._optimal_u(_rk4(self.rhs, z0, h, self._arg(u0)))
            cands = [u1] if np.allclose(u0, u1) else [u0, u1]
        if len(cands) == 1:
            return cands[0]
        tangent = _tangent_toward_nup(self.sys, self.cap, self.anchor)
        pool = cands or [np.array([self.box.upper[0]]), np.array([self.box.lower[0]])]
        if tangent is not None:
            speeds = [self.rhs(z0, self._arg(u))[: self.n] @ tangent for u in pool]
            return pool[int(np.argmax(speeds))]
        return self._u_from_sign(0.0)

    # -- stepping -------------------------------------------------------------

    def _switch_in_step(self, z_new):
        if self.has_sw:
            s = self._sw(z_new)
            return s * self.u[0] < 0 and abs(s) > 1e-15
        return not np.allclose(self._optimal_u(z_new), self.u)

    def _locate_switch(self, h):
        z, u = self.z, self._arg(self.u)
        H = abs(h)
        if self.has_sw:
            sgn = np.sign(self.u[0])

            def g(tau):
                return sgn * self._sw(_rk4(self.rhs, z, -tau, u))

            lo = 0.0
            if g(lo) < 0:
                lo = H * 1e-6
                while g(lo) < 0 and lo < H:
                    lo *= 4
            if lo < H and g(lo) >= 0:
                return brentq(g, lo, H, xtol=1e-15, rtol=1e-15, maxiter=200)
        lo, hi = 0.0, H
        while hi - lo > SWITCH_TTOL:
            mid = 0.5 * (lo + hi)
            if np.allclose(self._optimal_u(_rk4(self.rhs, z, -mid, u)), self.u):
                lo = mid
            else:
                hi = mid
        return hi

    def _accept(self, z_new, h_used, u_used):
        z_prev = self.z
        n = self.n
        z_new = z_new.copy()
        z_new[n:] /= math.sqrt(float(z_new[n:] @ z_new[n:]))
        t_new = self.t + h_used
        xc = z_new[self.crit]
        r_new = math.sqrt(float(xc @ xc))
        if not np.all(np.isfinite(z_new)):
            raise Diverged("non-finite state in retrograde integration")
        k1 = self.rhs(z_new, self._arg(self.u))
        res = float(z_new[n:] @ k1[:n])
        if abs(res) > self.drift_tol:
            raise IntegrationDrift(f"semipermeability residual {res:.3e} at t={t_new:.6f}")
        beta = self.cap.beta
        if self.inside and self.r <= beta < r_new:
            self._record_exit(z_prev, h_used, u_used)
            self.inside = False
        elif r_new < beta * (1 - 1e-12):
            self.inside = True
        self._k1 = k1
        self.seg_u.append(u_used.copy())
        self.z, self.t, self.r = z_new, t_new, r_new
        self.ts.append(t_new)
        self.zs.append(z_new)
        self.us.append(self.u.copy())
        if r_new > self.max_norm:
            raise Diverged(f"||P x||={r_new:.3g} exceeds {self.max_norm:.3g}")
        if self.stop_norm is not None and r_new > self.stop_norm:
            self.done, self.reason = True, "outside"

    def _record_exit(self, z_prev, h_used, u_used):
        u = self._arg(u_used)
        beta = self.cap.beta

        def g(tau):
            return self.cap.norm(_rk4(self.rhs, z_prev, -tau, u)[: self.n]) - beta

        tau = brentq(g, 0.0, abs(h_used), xtol=1e-15, rtol=1e-15, maxiter=200)
        x = _rk4(self.rhs, z_prev, -tau, u)[: self.n]
        try:
            is_nup = nup_membership(self.sys, self.cap, x) is BoundaryClass.NUP
        except DomainError:
            is_nup = False
        self.exits.append((self.t - tau, x, is_nup))

    def advance(self, t_stop: float) -> None:
        while not self.done and self.t > t_stop + 1e-15:
            h = max(-self.step, t_stop - self.t)
            ua = self._arg(self.u)
            z_new = _rk4(self.rhs, self.z, h, ua, self._k1)
            if self._switch_in_step(z_new):
                tau = self._locate_switch(h)
                z_sw = _rk4(self.rhs, self.z, -tau, ua, self._k1)
                u_old = self.u
                beyond = _rk4(self.rhs, self.z, -min(tau + 1e-9, abs(h)), ua, self._k1)
                u_new = self._optimal_u(beyond)
                if np.allclose(u_new, u_old):
                    u_new = self._optimal_u(_rk4(self.rhs, self.z, h, ua, self._k1))
                self.u = u_new
                self._accept(z_sw, -tau, u_old)
                self.switches.append(self.t)
                self._k1 = None
                continue
            self._accept(z_new, h, self.u)
        if self.t <= t_stop + 1e-15 and not self.done:
            self.reason = "horizon"

    # -- output ---------------------------------------------------------------

    def arrays(self):
        ts = np.array(self.ts)
        Z = np.array(self.zs)
        return ts, Z

    def trajectory(self) -> SurfaceTrajectory:
        ts, Z = self.arrays()
        X, XI = Z[:, : self.n], Z[:, self.n:]
        U = np.array(self.us)
        seg = np.array(self.seg_u) if self.seg_u else np.zeros((0, self.box.dim))
        if hasattr(self.sys, "omega_max"):
            ulf = np.arctan2(XI[:, 0], XI[:, 1])[:, None]
        else:
            ulf = np.array([np.atleast_1d(self.sys.planner_response(x, xi, self._arg(u)))
                            for x, xi, u in zip(X, XI, U)])
        return SurfaceTrajectory(
            system=self.sys,
            t=ts[::-1].copy(),
            states=X[::-1].copy(),
            adjoints=XI[::-1].copy(),
            u_lf=ulf[::-1].copy(),
            u_hf=U[::-1].copy(),
            seg_u_hf=seg[::-1].copy(),
            origin=self.anchor,
            switch_times=sorted(self.switches),
            exits=sorted(self.exits, key=lambda e: e[0], reverse=True),
        )


def integrate_surface(sys: RelativeSystem, cap: CaptivitySet, anchor: BnupPoint,
                      horizon: float, step: float = DEFAULT_STEP) -> SurfaceTrajectory:
    """Trace one surface backward from ``anchor`` over ``[-horizon, 0]``.

    Raises :class:`IntegrationDrift` when the semipermeability residual
    exceeds 1e-6 and :class:`Diverged` when ``||P x|| > 10 beta``.
    """
    if horizon <= 0:
        raise DomainError("horizon must be positive")
    flow = _RetrogradeFlow(sys, cap, anchor, step)
    flow.advance(-horizon)
    return flow.trajectory()


# -- intersections ------------------------------------------------------------


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _segment_hits(A: np.ndarray, B: np.ndarray | None = None):
    """Intersections between consecutive-point chains in 2-D.

    Candidate pairs come from a uniform grid hash with cells no smaller than
    the longest segment, so each segment touches at most four cells.  With
    ``B`` omitted, self-intersections of ``A`` (non-adjacent segments) are
    returned.  Each hit is ``(i, j, s, u)`` with
    ``A[i] + s (A[i+1]-A[i]) == B[j] + u (B[j+1]-B[j])``.
    """
    same = B is None
    if same:
        B = A
    if len(A) < 2 or len(B) < 2:
        return []
    a0, a1 = A[:-1], A[1:]
    b0, b1 = B[:-1], B[1:]
    P0 = np.vstack([a0, b0]) if not same else a0
    P1 = np.vstack([a1, b1]) if not same else a1
    na = len(a0)
    lo = np.minimum(P0, P1)
    hi = np.maximum(P0, P1)
    cell = max(float(np.max(hi - lo)), 1e-12) * 2.0
    origin = lo.min(axis=0)
    clo = np.floor((lo - origin) / cell).astype(np.int64)
    chi = np.floor((hi - origin) / cell).astype(np.int64)
    ncol = int(chi[:, 1].max()) + 2
    ids, keys = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            cx = clo[:, 0] + dx
            cy = clo[:, 1] + dy
            ok = (cx <= chi[:, 0]) & (cy <= chi[:, 1])
            ids.append(np.flatnonzero(ok))
            keys.append(cx[ok] * ncol + cy[ok])
    ids = np.concatenate(ids)
    keys = np.concatenate(keys)
    order = np.lexsort((ids, keys))
    ids, keys = ids[order], keys[order]
    pi, pj = [], []
    d = 1
    while d < len(keys):
        m = keys[d:] == keys[:-d]
        if not m.any():
            break
        pi.append(ids[:-d][m])
        pj.append(ids[d:][m])
        d += 1
    if not pi:
        return []
    i = np.concatenate(pi)
    j = np.concatenate(pj)
    if same:
        i, j = np.minimum(i, j), np.maximum(i, j)
        keep = j > i + 1
    else:
        # ids < na are A segments, the rest B segments
        swap = i >= na
        i, j = np.where(swap, j, i), np.where(swap, i, j)
        keep = (i < na) & (j >= na)
        j = j - na
    i, j = i[keep], j[keep]
    if not len(i):
        return []
    pairs = np.unique(np.column_stack([i, j]), axis=0)
    i, j = pairs[:, 0], pairs[:, 1]
    d_ = a1[i] - a0[i]
    e = b1[j] - b0[j]
    w = b0[j] - a0[i]
    den = _cross2(d_, e)
    ok = den != 0
    safe = np.where(ok, den, 1.0)
    s = np.where(ok, _cross2(w, e) / safe, -1.0)
    u = np.where(ok, _cross2(w, d_) / safe, -1.0)
    m = ok & (s >= 0) & (s <= 1) & (u >= 0) & (u <= 1)
    return [(int(i[q]), int(j[q]), float(s[q]), float(u[q])) for q in np.flatnonzero(m)]


def _closest_hits(A: np.ndarray, B: np.ndarray, threshold: float):
    """n-D analogue: sample pairs closer than ``threshold`` (closest approach)."""
    if len(A) < 2 or len(B) < 2:
        return []
    tree = cKDTree(B)
    seg = max(np.max(np.linalg.norm(np.diff(A, axis=0), axis=1)),
              np.max(np.linalg.norm(np.diff(B, axis=0), axis=1)))
    hits = []
    for i, js in enumerate(tree.query_ball_point(A[:-1], threshold + seg)):
        for j in js:
            if j >= len(B) - 1:
                continue
            p, d1 = A[i], A[i + 1] - A[i]
            q, d2 = B[j], B[j + 1] - B[j]
            # closest points of two segments (clamped least squares)
            M = np.array([[d1 @ d1, -d1 @ d2], [-d1 @ d2, d2 @ d2]])
            rhs = np.array([-(p - q) @ d1, (p - q) @ d2])
            try:
                s, u = np.clip(np.linalg.solve(M, rhs), 0, 1)
            except np.linalg.LinAlgError:
                s, u = 0.0, 0.0
            if np.linalg.norm(p + s * d1 - q - u * d2) <= threshold:
                hits.append((i, j, float(s), float(u)))
    return hits


def _refine_pair(traj_a: SurfaceTrajectory, ia: int, sa: float,
                 traj_b: SurfaceTrajectory, ib: int, sb: float, proj) -> tuple[float, float, np.ndarray]:
    """Newton refinement of ``x_a(t_a) = x_b(t_b)`` on the dense output."""
    ta = traj_a.t[ia] + sa * (traj_a.t[ia + 1] - traj_a.t[ia])
    tb = traj_b.t[ib] + sb * (traj_b.t[ib + 1] - traj_b.t[ib])
    ax = np.flatnonzero(np.diag(proj) > 0.5)
    if len(ax) != 2:
        ax = np.arange(2)
    for _ in range(30):
        xa, xb = traj_a.state_at(ta), traj_b.state_at(tb)
        F = (xa - xb)[ax]
        if np.max(np.abs(F)) < 1e-15:
            break
        va = traj_a.velocity_at(ta, ia)[ax]
        vb = traj_b.velocity_at(tb, ib)[ax]
        J = np.column_stack([va, -vb])
        try:
            d = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        ta = float(np.clip(ta + d[0], traj_a.t[0], traj_a.t[-1]))
        tb = float(np.clip(tb + d[1], traj_b.t[0], traj_b.t[-1]))
        if np.max(np.abs(d)) < 1e-16:
            break
    return ta, tb, 0.5 * (traj_a.state_at(ta) + traj_b.state_at(tb))


class JunctionKind(enum.Enum):
    SURFACE = "surface"
    NUP = "nup"
    SELF = "self"


@dataclass(frozen=True)
class Junction:
    kind: JunctionKind
    t: float
    state: np.ndarray
    partner: int | None = None
    partner_t: float | None = None


@dataclass
class ClosedBarrier:
    pieces: list
    junction: np.ndarray
    junctions: list
    trimmed: bool
    surfaces: list = field(repr=False, default_factory=list)

    @property
    def t_hats(self) -> list[float]:
        return [p.t_hat for p in self.pieces]


def _cusp_time(tr: SurfaceTrajectory, ts: float) -> float | None:
    """``ts`` if the surface reverses direction at the switch there.

    Past a cusp the surface folds back onto itself; whether the two branches
    register as a segment crossing depends on rounding, so the fold is
    detected from the one-sided velocities instead.
    """
    i = int(np.searchsorted(tr.t, ts))
    if i <= 0 or i >= len(tr.t) - 1 or abs(tr.t[i] - ts) > 1e-12:
        return None
    before = tr.velocity_at(ts, seg=i - 1)
    after = tr.velocity_at(ts, seg=i)
    return ts if before @ after < 0 else None


def _find_candidates(trajs: list[SurfaceTrajectory], cap: CaptivitySet, modes: set[str]):
    """All junction candidates per piece: list of lists of Junction."""
    planar = len(cap.critical_axes) == 2 and trajs[0].n == 2
    thr = 1e-7 * cap.beta
    out = [[] for _ in trajs]
    # trajectories are searched in integration order (anchor first)
    pts = [tr.states[::-1] for tr in trajs]
    m = [len(tr.t) for tr in trajs]

    def idx(k, i):
        # integration-order segment i -> ascending segment index
        return m[k] - 2 - i

    def hits(A, B):
        return _segment_hits(A, B) if planar else _closest_hits(A, B, thr)

    if "surface" in modes:
        for a in range(len(trajs)):
            for b in range(a + 1, len(trajs)):
                for i, j, s, u in hits(pts[a], pts[b]):
                    ia, ib = idx(a, i), idx(b, j)
                    ta, tb, x = _refine_pair(trajs[a], ia, 1 - s, trajs[b], ib, 1 - u, cap.projection)
                    if ta > -1e-9 and tb > -1e-9:
                        continue  # the anchors themselves
                    out[a].append(Junction(JunctionKind.SURFACE, ta, x, b, tb))
                    out[b].append(Junction(JunctionKind.SURFACE, tb, x, a, ta))
    if "self" in modes:
        for a, tr in enumerate(trajs):
            for i, j, s, u in (_segment_hits(pts[a]) if planar else _closest_hits(pts[a], pts[a], thr)):
                if j <= i + 1:
                    continue
                ia, ib = idx(a, i), idx(a, j)
                t1, t2, x = _refine_pair(tr, ia, 1 - s, tr, ib, 1 - u, cap.projection)
                if abs(t1 - t2) < 1e-9:
                    continue
                out[a].append(Junction(JunctionKind.SELF, min(t1, t2), x, a, max(t1, t2)))
            for ts in tr.switch_times:
                t_cusp = _cusp_time(tr, ts)
                if t_cusp is not None:
                    out[a].append(Junction(JunctionKind.SELF, t_cusp, tr.state_at(t_cusp), a, t_cusp))
    if "nup" in modes:
        for a, tr in enumerate(trajs):
            for t, x, is_nup in tr.exits:
                if is_nup:
                    out[a].append(Junction(JunctionKind.NUP, t, x))
    return out


def _select_junctions(cands):
    """Per piece the latest valid junction; pairwise junctions must lie on the
    kept part of the partner, so iterate to a fixed point."""
    chosen = [max(c, key=lambda j: j.t) if c else None for c in cands]
    for _ in range(len(cands) + 2):
        changed = False
        for a, c in enumerate(cands):
            valid = []
            for j in c:
                if j.kind is JunctionKind.SURFACE and chosen[j.partner] is not None:
                    if j.partner_t < chosen[j.partner].t - 1e-12:
                        continue
                valid.append(j)
            best = max(valid, key=lambda j: j.t) if valid else None
            if best is not chosen[a]:
                chosen[a], changed = best, True
        if not changed:
            break
    return chosen


def _build_flows(sys, cap, anchors, step, stop_factor):
    return [_RetrogradeFlow(sys, cap, a, step, stop_factor=stop_factor) for a in anchors]


def trace_junctions(sys: RelativeSystem, cap: CaptivitySet, anchors: Sequence[BnupPoint],
                    horizon: float | None = None, step: float = DEFAULT_STEP,
                    close_on_nup: bool = True, chunk: float = CHUNK):
    """Integrate all anchored surfaces in lock-step chunks until each has a junction.

    Returns ``(trajectories, junctions)``.  With ``close_on_nup`` false only
    surface/surface intersections count, as required by the junction-manifold
    condition.
    """
    if horizon is None:
        horizon = sys.default_horizon(cap.beta)
    modes = {"surface", "self"} | ({"nup"} if close_on_nup else set())
    flows = _build_flows(sys, cap, anchors, step, ASSEMBLY_STOP_FACTOR)
    t_stop = 0.0
    chosen = [None] * len(flows)
    trajs = None
    while True:
        t_stop = max(t_stop - chunk, -horizon)
        active = [f for k, f in enumerate(flows) if chosen[k] is None and not f.done]
        for f in active:
            f.advance(t_stop)
        trajs = [f.trajectory() for f in flows]
        chosen = _select_junctions(_find_candidates(trajs, cap, modes))
        if all(c is not None for c in chosen):
            break
        if all(f.done or f.t <= -horizon + 1e-12 or chosen[k] is not None for k, f in enumerate(flows)):
            break
    return trajs, chosen


def assemble_barrier(sys: RelativeSystem, cap: CaptivitySet, surfaces: Sequence[SurfaceTrajectory],
                     close_on_nup: bool = True) -> ClosedBarrier:
    """Intersect surfaces with each other (and with the NUP) and trim them.

    Each surface keeps the part between its latest junction ``t_hat`` and the
    anchor; later (more retrograde) portions are discarded.
    """
    if not surfaces:
        raise DomainError("at least one surface is required")
    modes = {"surface", "self"} | ({"nup"} if close_on_nup else set())
    chosen = _select_junctions(_find_candidates(list(surfaces), cap, modes))
    return _barrier_from(surfaces, chosen)


def _barrier_from(surfaces, chosen) -> ClosedBarrier:
    if any(c is None for c in chosen):
        missing = [k for k, c in enumerate(chosen) if c is None]
        raise BarrierOpen(f"no junction found for surface(s) {missing} within the horizon")
    pieces = [s.trim(c.t) for s, c in zip(surfaces, chosen)]
    surf = [c for c in chosen if c.kind is JunctionKind.SURFACE]
    primary = surf[0] if surf else chosen[0]
    return ClosedBarrier(
        pieces=pieces,
        junction=np.asarray(primary.state),
        junctions=list(chosen),
        trimmed=any(c.kind is JunctionKind.SELF for c in chosen),
        surfaces=list(surfaces),
    )


def build_barrier(sys: RelativeSystem, cap: CaptivitySet, horizon: float | None = None,
                  step: float = DEFAULT_STEP, close_on_nup: bool = True,
                  anchors: Sequence[BnupPoint] | None = None) -> ClosedBarrier:
    """BNUP search, surface tracing and assembly in one call."""
    if anchors is None:
        anchors = compute_bnup(sys, cap)
    trajs, chosen = trace_junctions(sys, cap, anchors, horizon, step, close_on_nup)
    return _barrier_from(trajs, chosen)


# -- tracking error bound -----------------------------------------------------


class Membership(enum.Enum):
    INTERIOR = "interior"
    BOUNDARY_NUP = "boundary_nup"
    BOUNDARY_BARRIER = "boundary_barrier"
    OUTSIDE = "outside"


@dataclass
class BoundaryQuery:
    distance: np.ndarray
    inside: np.ndarray
    segment: np.ndarray
    point: np.ndarray
    normal: np.ndarray | None = None
    far: np.ndarray | None = None


def _piece_name(piece: SurfaceTrajectory, k: int) -> str:
    x0 = piece.origin.state
    if len(x0) == 2:
        if x0[0] > 1e-12:
            return "barrier_right"
        if x0[0] < -1e-12:
            return "barrier_left"
    return f"barrier_{k}"


@dataclass
class TrackingErrorBound:
    """Closed region bounded by NUP arcs and trimmed barrier pieces.

    The boundary is stored as counter-clockwise loops of vertices with one
    label per segment; membership uses the nearest boundary segment and its
    (pseudo-)normal, which is exact for closed loops.
    """

    system: RelativeSystem = field(repr=False)
    cap: CaptivitySet
    barrier: ClosedBarrier = field(repr=False)
    nup_arcs: list = field(repr=False)
    loops: list = field(repr=False)
    beta: float = 0.0
    band: float = 0.0

    def __post_init__(self):
        self.beta = self.cap.beta
        self.band = 1e-7 * self.beta
        verts, seg_a, seg_b, labels, comps, seg_u, loop_id = [], [], [], [], [], [], []
        names = ["nup"] + [_piece_name(p, k) for k, p in enumerate(self.barrier.pieces)]
        self.component_names = names
        off = 0
        for li, loop in enumerate(self.loops):
            V = np.vstack([pl for _, pl, _ in loop])
            lab = np.concatenate([np.full(len(pl), c) for c, pl, _ in loop])
            us = np.concatenate([u for _, _, u in loop])
            m = len(V)
            verts.append(V)
            seg_a.append(off + np.arange(m))
            seg_b.append(off + (np.arange(m) + 1) % m)
            labels.append(lab)
            seg_u.append(us)
            loop_id.append(np.full(m, li))
            off += m
        self.vertices = np.vstack(verts)
        self.seg_a = np.concatenate(seg_a)
        self.seg_b = np.concatenate(seg_b)
        self.seg_label = np.concatenate(labels)
        self.seg_u = np.concatenate(seg_u)
        self.seg_loop = np.concatenate(loop_id)
        d = self.vertices[self.seg_b] - self.vertices[self.seg_a]
        L = np.linalg.norm(d, axis=1)
        self.seg_len = L
        self.seg_normal = np.column_stack([d[:, 1], -d[:, 0]]) / np.where(L > 0, L, 1)[:, None]
        nv = len(self.vertices)
        prev_seg = np.empty(nv, dtype=int)
        prev_seg[self.seg_b] = np.arange(len(self.seg_b))
        self.prev_seg = prev_seg
        vn = self.seg_normal + self.seg_normal[prev_seg]
        self.vertex_normal = vn / np.maximum(np.linalg.norm(vn, axis=1), 1e-300)[:, None]
        self._tree = cKDTree(self.vertices)
        # vertices where the boundary touches itself; their normal is undefined
        pairs = self._tree.query_pairs(1e-12 * self.beta, output_type="ndarray")
        self.pinch = np.zeros(nv, dtype=bool)
        self.pinch[pairs.ravel()] = True
        self._seg_start = self.vertices[self.seg_a]
        self._seg_vec = d
        self._seg_inv_l2 = 1.0 / np.maximum(L * L, 1e-300)
        self._max_seg = float(L.max())
        self.anchors = np.array([p.origin.state for p in self.barrier.pieces])

    # -- summary quantities ---------------------------------------------------

    @property
    def wte(self) -> float:
        """Worst-case tracking error over the boundary samples."""
        return float(np.max(np.linalg.norm(self.vertices @ self.cap.projection.T, axis=1)))

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def area(self) -> float:
        total = 0.0
        for li in range(len(self.loops)):
            sel = self.seg_loop == li
            a, b = self.vertices[self.seg_a[sel]], self.vertices[self.seg_b[sel]]
            total += 0.5 * float(np.sum(_cross2(a, b)))
        return total

    def polygon(self, loop: int = 0) -> np.ndarray:
        sel = self.seg_loop == loop
        return self.vertices[self.seg_a[sel]]

    def components(self):
        """``(name, polyline)`` pairs in boundary order."""
        out = []
        for loop in self.loops:
            for c, pl, _ in loop:
                out.append((self.component_names[c], pl))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component"] + [f"x{i + 1}" for i in range(self.vertices.shape[1])])
            for name, pl in self.components():
                for p in pl:
                    w.writerow([name] + [_fmt(v) for v in p])

    # -- queries --------------------------------------------------------------

    def query(self, X, k: int = 6, bound: float | None = None) -> BoundaryQuery:
        """Nearest boundary point, distance and inside flag for each row of ``X``.

        With ``bound``, rows farther than ``bound`` from every vertex are only
        reported as such (``far`` mask, infinite distance, ``inside`` unset).
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k = min(k, len(self.vertices))
        if bound is None:
            _, vi = self._tree.query(X, k=k)
            vi = vi.reshape(len(X), k)
        else:
            nv = len(self.vertices)
            _, vi = self._tree.query(X, k=k, distance_upper_bound=bound + self._max_seg)
            vi = vi.reshape(len(X), k)
            far = vi[:, 0] == nv
            if far.any():
                out = BoundaryQuery(np.full(len(X), np.inf), np.zeros(len(X), dtype=bool),
                                    np.full(len(X), -1), np.full(X.shape, np.nan),
                                    np.full(X.shape, np.nan), far)
                near = ~far
                if near.any():
                    sub = self.query(X[near], k=k, bound=bound)
                    out.distance[near] = sub.distance
                    out.inside[near] = sub.inside
                    out.segment[near] = sub.segment
                    out.point[near] = sub.point
                    out.normal[near] = sub.normal
                return out
            vi = np.where(vi == nv, vi[:, :1], vi)
        segs = np.concatenate([vi, self.prev_seg[vi]], axis=1)  # seg starting at v, seg ending at v
        A = self._seg_start[segs]
        D = self._seg_vec[segs]
        W = X[:, None, :] - A
        s = (W[..., 0] * D[..., 0] + W[..., 1] * D[..., 1]) * self._seg_inv_l2[segs]
        np.clip(s, 0.0, 1.0, out=s)
        ex = W[..., 0] - s * D[..., 0]
        ey = W[..., 1] - s * D[..., 1]
        d2 = ex * ex + ey * ey
        # on ties prefer projections inside a segment: their normal is exact,
        # while a vertex normal is ambiguous where the boundary touches itself
        clamped = (s <= 0.0) | (s >= 1.0)
        best = np.argmin(np.where(clamped, d2 * (1 + 1e-9), d2), axis=1)
        rows = np.arange(len(X))
        seg = segs[rows, best]
        sb = s[rows, best]
        q = A[rows, best] + sb[:, None] * D[rows, best]
        n = self.seg_normal[seg]
        at_a = sb <= 0.0
        at_b = sb >= 1.0
        if at_a.any() or at_b.any():
            n = n.copy()
            n[at_a] = self.vertex_normal[self.seg_a[seg[at_a]]]
            n[at_b] = self.vertex_normal[self.seg_b[seg[at_b]]]
        e = np.column_stack([ex[rows, best], ey[rows, best]])
        inside = (e[:, 0] * n[:, 0] + e[:, 1] * n[:, 1]) < 0
        if self.pinch.any():
            vert = np.where(at_a, self.seg_a[seg], np.where(at_b, self.seg_b[seg], -1))
            amb = (vert >= 0) & self.pinch[np.maximum(vert, 0)]
            if amb.any():
                inside[amb] = self._ray_cast(X[amb])
        return BoundaryQuery(np.sqrt(d2[rows, best]), inside, seg, q, n)

    def _ray_cast(self, X) -> np.ndarray:
        """Even-odd rule against all boundary segments."""
        A, B = self.vertices[self.seg_a], self.vertices[self.seg_b]
        out = np.empty(len(X), dtype=bool)
        for i, (x, y) in enumerate(X):
            up = (A[:, 1] > y) != (B[:, 1] > y)
            xa, ya, xb, yb = A[up, 0], A[up, 1], B[up, 0], B[up, 1]
            xc = xa + (y - ya) * (xb - xa) / (yb - ya)
            out[i] = bool(np.count_nonzero(x < xc) % 2)
        return out

    def classify(self, X, band: float | None = None):
        """Vectorised membership labels (array of :class:`Membership`)."""
        band = self.band if band is None else band
        qr = self.query(X)
        out = np.empty(len(qr.distance), dtype=object)
        for i in range(len(out)):
            if qr.distance[i] <= band:
                lab = self.seg_label[qr.segment[i]]
                out[i] = Membership.BOUNDARY_NUP if lab == 0 or self._touches_nup(qr.point[i]) \
                    else Membership.BOUNDARY_BARRIER
            else:
                out[i] = Membership.INTERIOR if qr.inside[i] else Membership.OUTSIDE
        return out

    def _touches_nup(self, q) -> bool:
        # closed NUP: its end points (the BNUP anchors) carry the NUP label
        return bool(len(self.anchors)) and np.min(np.linalg.norm(self.anchors - q, axis=1)) <= self.band

    def near_anchor(self, X, tol: float | None = None) -> np.ndarray:
        tol = self.band if tol is None else tol
        X = np.atleast_2d(X)
        if not len(self.anchors):
            return np.zeros(len(X), dtype=bool)
        d = np.linalg.norm(X[:, None, :] - self.anchors[None], axis=2)
        return d.min(axis=1) <= tol


def teb_membership(teb: TrackingErrorBound, x) -> Membership:
    """Interior, boundary (NUP or barrier) or outside, with a 1e-7*beta band."""
    return teb.classify(np.atleast_2d(np.asarray(x, dtype=float)))[0]


def _arc_points(cap: CaptivitySet, a: float, b: float, spacing: float, extra=()) -> np.ndarray:
    n = max(2, int(math.ceil(cap.beta * abs(b - a) / spacing)) + 1)
    phis = np.linspace(a, b, n)
    inner = [q for q in extra if a < q < b]
    if inner:
        phis = np.unique(np.concatenate([phis, inner]))
        # drop grid angles crowding an inserted one
        keep = np.ones(len(phis), dtype=bool)
        for q in inner:
            close = np.abs(phis - q) < 1e-3 * (b - a) / n
            close[np.argmin(np.abs(phis - q))] = False
            keep &= ~close
        phis = phis[keep]
    return np.array([cap.boundary_point(p) for p in phis])


def _angle_of(x) -> float:
    return math.atan2(x[1], x[0])


def _unwrap_into(phi, a):
    """Representative of ``phi`` in ``[a, a + 2 pi)``."""
    return a + (phi - a) % (2 * math.pi)


def build_teb(sys: RelativeSystem, cap: CaptivitySet, barrier: ClosedBarrier,
              arc_spacing: float | None = None, tol: float = 1e-9) -> TrackingErrorBound:
    """Walk NUP arcs and barrier pieces into closed boundary loops.

    Planar systems only.  Raises :class:`GeometryError` when consecutive
    boundary components do not meet within ``tol`` or when the resulting
    worst-case tracking error differs from beta by more than ``tol``.
    """
    if sys.state_dim != 2 or len(cap.critical_axes) != 2:
        raise NotImplementedError("TEB assembly is implemented for planar systems")
    if any(j.kind is JunctionKind.SELF for j in barrier.junctions):
        raise GeometryError("self-intersecting barrier pieces cannot be assembled into a TEB")
    if arc_spacing is None:
        arc_spacing = 4e-4 * cap.beta
    pieces = barrier.pieces
    anchors = [p.origin for p in pieces]
    arcs = nup_arcs(sys, cap, anchors)
    angle = [a.angle for a in anchors]
    scale = tol * max(1.0, cap.beta)

    def same(a, b):
        return abs(((a - b) + math.pi) % (2 * math.pi) - math.pi) < 1e-9

    def arc_starting(k):
        for arc in arcs:
            if same(arc[0], angle[k]):
                return arc
        return None

    def arc_containing(phi):
        for arc in arcs:
            p = _unwrap_into(phi, arc[0])
            if p <= arc[1] + 1e-12:
                return arc, p
        return None, None

    def anchor_at(phi):
        for k in range(len(anchors)):
            if same(phi, angle[k]):
                return k
        return None

    nup_exit = {k: _angle_of(j.state) for k, j in enumerate(barrier.junctions) if j.kind is JunctionKind.NUP}

    def piece_poly(k, forward):
        p = pieces[k]
        us = np.concatenate([p.seg_u_hf[:, 0], [np.nan]]) if forward else \
            np.concatenate([p.seg_u_hf[::-1, 0], [np.nan]])
        pts = p.states if forward else p.states[::-1]
        return (k + 1, pts, us)

    # junctions on the captivity boundary become exact arc vertices, so the
    # arc touches the barrier there instead of cutting under it by a chord
    on_circle = [_angle_of(j.state) for j in barrier.junctions
                 if abs(cap.norm(j.state) - cap.beta) <= 1e-12 * cap.beta]

    def nup_poly(a, b):
        pts = _arc_points(cap, a, b, arc_spacing, [_unwrap_into(q, a) for q in on_circle])
        return (0, pts, np.full(len(pts), np.nan))

    loops = []
    visited = set()
    for k0 in range(len(anchors)):
        if k0 in visited:
            continue
        loop = []
        k, mode, phi = k0, None, None
        if arc_starting(k0) is not None:
            mode, phi = "arc", angle[k0]
        else:
            mode = "piece_back"
        for _ in range(4 * len(anchors) + 4):
            if mode == "arc":
                arc, p0 = arc_containing(phi)
                if arc is None:
                    raise GeometryError(f"angle {phi} not on a NUP arc")
                stops = [(arc[1], "end", None)]
                for j, psi in nup_exit.items():
                    q = _unwrap_into(psi, arc[0])
                    if p0 + 1e-12 < q <= arc[1] + 1e-12:
                        stops.append((q, "exit", j))
                stop, kind, j = min(stops, key=lambda s: s[0])
                loop.append(nup_poly(p0, stop))
                if kind == "exit":
                    loop.append(piece_poly(j, True))
                    visited.add(j)
                    if j == k0:
                        break
                    mode, phi = "arc", angle[j]
                    continue
                e = anchor_at(stop)
                if e is None:
                    raise GeometryError("NUP arc ends away from a BNUP anchor")
                if e == k0 and arc_starting(k0) is None:
                    break
                k, mode = e, "piece_back"
                continue
            # walk piece k backward to its junction
            visited.add(k)
            loop.append(piece_poly(k, False))
            jn = barrier.junctions[k]
            if jn.kind is JunctionKind.SURFACE:
                p = jn.partner
                loop.append(piece_poly(p, True))
                visited.add(p)
                if p == k0:
                    break
                if arc_starting(p) is None:
                    raise GeometryError("barrier pieces do not alternate with NUP arcs")
                mode, phi = "arc", angle[p]
            else:
                mode, phi = "arc", _angle_of(jn.state)
        else:
            raise GeometryError("boundary walk did not close")
        # drop duplicated joints and check continuity
        cleaned = []
        for i, (c, pts, us) in enumerate(loop):
            nxt = loop[(i + 1) % len(loop)][1][0]
            gap = np.linalg.norm(pts[-1] - nxt)
            if gap > scale:
                raise GeometryError(f"boundary gap {gap:.3e} between components")
            cleaned.append((c, pts[:-1], us[:-1]))
        area = 0.0
        V = np.vstack([pts for _, pts, _ in cleaned])
        area = 0.5 * float(np.sum(_cross2(V, np.roll(V, -1, axis=0))))
        if area < 0:
            raise GeometryError("boundary loop is clockwise")
        loops.append(cleaned)
    teb = TrackingErrorBound(system=sys, cap=cap, barrier=barrier, nup_arcs=arcs, loops=loops)
    if abs(teb.wte - cap.beta) > scale:
        raise GeometryError(f"worst-case tracking error {teb.wte} differs from beta {cap.beta}")
    return teb
