"""Captivity set, nonusable part (NUP) and its boundary (BNUP)."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, NoBnupError
from .systems import RelativeSystem

BOUNDARY_RTOL = 1e-9
#: |H| below this counts as zero when classifying ties as NUP (closed set)
HAMILTONIAN_TIE = 1e-12


class BoundaryClass(enum.Enum):
    NUP = "nup"
    ESCAPABLE = "escapable"


@dataclass(frozen=True)
class CaptivitySet:
    """The ball ``{x : ||P x|| <= beta}``."""

    beta: float
    projection: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise DomainError(f"beta must be positive and finite, got {self.beta}")
        object.__setattr__(self, "projection", np.asarray(self.projection, dtype=float))

    @classmethod
    def for_system(cls, sys: RelativeSystem, beta: float) -> "CaptivitySet":
        return cls(float(beta), sys.projection)

    @property
    def safety_margin(self) -> float:
        return self.beta

    def norm(self, x) -> float:
        return float(np.linalg.norm(self.projection @ np.asarray(x, dtype=float)))

    def on_boundary(self, x, rtol: float = BOUNDARY_RTOL) -> bool:
        return abs(self.norm(x) - self.beta) <= rtol * self.beta

    def classify(self, x, rtol: float = BOUNDARY_RTOL) -> str:
        """``"interior"``, ``"boundary"`` or ``"exterior"``."""
        r = self.norm(x)
        if abs(r - self.beta) <= rtol * self.beta:
            return "boundary"
        return "interior" if r < self.beta else "exterior"

    def outward_normal(self, x) -> np.ndarray:
        px = self.projection @ np.asarray(x, dtype=float)
        n = np.linalg.norm(px)
        if n == 0:
            raise DomainError("outward normal undefined where P x = 0")
        return px / n

    @property
    def critical_axes(self) -> np.ndarray:
        return np.flatnonzero(np.diag(self.projection) > 0.5)

    @property
    def free_axes(self) -> np.ndarray:
        return np.flatnonzero(np.diag(self.projection) < 0.5)

    def boundary_point(self, angle: float, kappa=()) -> np.ndarray:
        """Point of the boundary for a planar critical subspace."""
        ax = self.critical_axes
        if len(ax) != 2:
            raise NotImplementedError("angle parametrisation needs a 2-D critical subspace")
        x = np.zeros(self.projection.shape[0])
        x[ax[0]] = self.beta * math.cos(angle)
        x[ax[1]] = self.beta * math.sin(angle)
        x[self.free_axes] = kappa
        return x


@dataclass(frozen=True)
class BnupPoint:
    state: np.ndarray
    kappa: np.ndarray
    outward_normal: np.ndarray
    angle: float = math.nan


def minmax_hamiltonian(sys: RelativeSystem, x, nu) -> float:
    """``min_{u_hf} max_{u_lf} nu . f(x, u_lf, u_hf)`` with this order fixed."""
    nu = np.asarray(nu, dtype=float)
    if not np.any(nu):
        raise DomainError("normal vector must be nonzero")
    x = np.asarray(x, dtype=float)
    closed = getattr(sys, "minmax_value", None)
    if closed is not None:
        return float(closed(x, nu))
    u_lf, u_hf = sys.minmax_inputs(x, nu)
    return float(nu @ sys.vector_field(x, u_lf, u_hf))


def maxmin_hamiltonian(sys: RelativeSystem, x, nu) -> float:
    """The swapped order, for checking whether a saddle point exists."""
    nu = np.asarray(nu, dtype=float)
    if not np.any(nu):
        raise DomainError("normal vector must be nonzero")
    return float(sys.maxmin_value(np.asarray(x, dtype=float), nu))


def nup_membership(sys: RelativeSystem, cap: CaptivitySet, x) -> BoundaryClass:
    """Classify a boundary state as NUP (ties included) or escapable."""
    x = np.asarray(x, dtype=float)
    if not cap.on_boundary(x):
        raise DomainError(
            f"state {x} is not on the captivity boundary (||Px||={cap.norm(x)}, beta={cap.beta})"
        )
    h = minmax_hamiltonian(sys, x, cap.outward_normal(x))
    return BoundaryClass.NUP if h <= HAMILTONIAN_TIE else BoundaryClass.ESCAPABLE


def _hamiltonian_on_circle(sys, cap, kappa):
    def h(phi):
        x = cap.boundary_point(phi, kappa)
        return minmax_hamiltonian(sys, x, cap.outward_normal(x))
    return h


def _angle_dist(a, b):
    d = (a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def _circle_roots(h, n_angle: int) -> list[float]:
    phis = np.linspace(-math.pi, math.pi, n_angle, endpoint=False)
    vals = np.array([h(p) for p in phis])
    # values at rounding level count as exact zeros (e.g. angles that are multiples of pi)
    zero = 1e-14 * max(float(np.max(np.abs(vals))), 1e-300)
    roots = []
    for i in range(n_angle):
        a, b = phis[i], phis[(i + 1) % n_angle] + (2 * math.pi if i == n_angle - 1 else 0.0)
        fa = vals[i]
        fb = vals[i + 1] if i < n_angle - 1 else h(b)
        if abs(fa) <= zero:
            roots.append(a)
        elif abs(fb) <= zero:
            # h(pi) and h(-pi) differ by rounding, so record the end point here
            roots.append(b)
        elif fa * fb < 0:
            roots.append(brentq(h, a, b, xtol=1e-15, rtol=1e-15, maxiter=200))
    out = []
    for r in roots:
        r = math.atan2(math.sin(r), math.cos(r))
        if all(_angle_dist(r, q) > 1e-9 for q in out):
            out.append(r)
    return sorted(out)


def compute_bnup(sys: RelativeSystem, cap: CaptivitySet, n_angle: int = 256,
                 kappa_bounds=None, kappa_resolution: int = 64) -> list[BnupPoint]:
    """Solve the min-max equality on the captivity boundary.

    The boundary is parametrised by an angle in the critical plane; free
    coordinates ``kappa`` are sampled on a grid (``kappa_resolution`` per
    dimension over ``kappa_bounds``).  Sign changes of the Hamiltonian along
    the angle are refined with Brent's method.  Points are returned ordered by
    grid cell, then by angle in ``[-pi, pi)``.
    """
    free = cap.free_axes
    if len(cap.critical_axes) != 2:
        raise NotImplementedError("BNUP search supports a 2-D critical subspace only")
    if len(free):
        if kappa_bounds is None:
            raise DomainError("kappa_bounds required when the state has free coordinates")
        axes = [np.linspace(lo, hi, kappa_resolution) for lo, hi in kappa_bounds]
        grid = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
    else:
        grid = np.zeros((1, 0))
    points = []
    for kappa in grid:
        for phi in _circle_roots(_hamiltonian_on_circle(sys, cap, kappa), n_angle):
            x = cap.boundary_point(phi, kappa)
            points.append(BnupPoint(x, np.array(kappa, dtype=float), cap.outward_normal(x), phi))
    if not points:
        raise NoBnupError("min-max Hamiltonian has no zero on the captivity boundary")
    return points


def nup_arcs(sys: RelativeSystem, cap: CaptivitySet, bnup: list[BnupPoint]) -> list[tuple[float, float]]:
    """Angular intervals ``(start, end)`` (counter-clockwise, ``end > start``)
    of the NUP between consecutive BNUP angles, for a planar system."""
    if len(cap.free_axes):
        raise NotImplementedError("NUP arcs are only defined for planar systems")
    angles = sorted(p.angle for p in bnup)
    h = _hamiltonian_on_circle(sys, cap, ())
    arcs = []
    for i, a in enumerate(angles):
        b = angles[(i + 1) % len(angles)]
        if b <= a:
            b += 2 * math.pi
        if h(0.5 * (a + b)) <= 0:
            arcs.append((a, b))
    return arcs
